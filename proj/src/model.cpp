#include "rebalance_ssl/model.hpp"

#include <cstring>
#include <fstream>
#include <numbers>

namespace rssl {

std::string arch_name(Arch arch) { return arch == Arch::SmallCNN ? "small" : "wrn28-2"; }

Arch parse_arch(const std::string& name) {
  if (name == "small") return Arch::SmallCNN;
  if (name == "wrn28-2") return Arch::WideResNet28_2;
  throw ConfigError("unknown architecture '" + name + "' (expected wrn28-2 or small)");
}

void validate(const OptimizerConfig& config) {
  if (!(config.learning_rate > 0.0)) throw ConfigError("optimizer.learning_rate must be > 0");
  if (!(config.momentum >= 0.0 && config.momentum < 1.0)) throw ConfigError("optimizer.momentum must be in [0,1)");
  if (!(config.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (!(config.ema_decay >= 0.0 && config.ema_decay < 1.0)) throw ConfigError("optimizer.ema_decay must be in [0,1)");
}

double learning_rate_at(const OptimizerConfig& config, long step, long total_steps) {
  if (config.schedule == LrSchedule::Constant || total_steps <= 0) return config.learning_rate;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return config.learning_rate * std::cos(7.0 * std::numbers::pi * progress / 16.0);
}

namespace {

constexpr char kMagic[8] = {'R', 'S', 'S', 'L', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& file) : os_(file, std::ios::binary) {
    if (!os_) throw ConfigError("cannot write checkpoint: " + file.string());
  }
  template <typename T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename Scalar>
  void mat(const nn::Mat<Scalar>& m) {
    pod(static_cast<std::uint32_t>(m.rows()));
    pod(static_cast<std::uint32_t>(m.cols()));
    os_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(Scalar)));
  }
  void raw(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }
  void finish(const std::filesystem::path& file) {
    os_.flush();
    if (!os_) throw ConfigError("checkpoint write failed: " + file.string());
  }

 private:
  std::ofstream os_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& file) : is_(file, std::ios::binary), file_(file) {
    if (!is_) throw ConfigError("cannot read checkpoint: " + file.string());
  }
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    check();
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 24)) fail("implausible string length");
    std::string s(n, '\0');
    is_.read(s.data(), n);
    check();
    return s;
  }
  template <typename Scalar>
  nn::Mat<Scalar> mat() {
    const auto rows = pod<std::uint32_t>();
    const auto cols = pod<std::uint32_t>();
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 30)) fail("implausible tensor shape");
    nn::Mat<Scalar> m(rows, cols);
    is_.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(Scalar)));
    check();
    return m;
  }
  void raw(char* p, std::size_t n) {
    is_.read(p, static_cast<std::streamsize>(n));
    check();
  }
  [[noreturn]] void fail(const std::string& what) {
    throw ConfigError("corrupt checkpoint " + file_.string() + ": " + what);
  }

 private:
  void check() {
    if (!is_) fail("truncated");
  }
  std::ifstream is_;
  std::filesystem::path file_;
};

template <typename Scalar>
CheckpointInfo read_header(Reader& r) {
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) r.fail("not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw ConfigError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  if (r.pod<std::uint32_t>() != sizeof(Scalar)) throw ConfigError("checkpoint scalar type mismatch");
  CheckpointInfo info;
  const auto arch = r.pod<std::uint32_t>();
  if (arch > 1) r.fail("unknown architecture tag");
  info.arch = static_cast<Arch>(arch);
  info.num_classes = static_cast<int>(r.pod<std::uint32_t>());
  info.input_size = static_cast<int>(r.pod<std::uint32_t>());
  info.config_hash = r.pod<std::uint64_t>();
  info.step = static_cast<long>(r.pod<std::int64_t>());
  info.rng_state = r.str();
  return info;
}

template <typename Scalar>
void read_tensors(Reader& r, Classifier<Scalar>& model, SgdOptimizer<Scalar>* optimizer) {
  auto params = model.parameters();
  if (r.pod<std::uint32_t>() != params.size()) throw ConfigError("checkpoint parameter count mismatch");
  for (auto* p : params) {
    const std::string name = r.str();
    nn::Mat<Scalar> m = r.template mat<Scalar>();
    if (name != p->name || m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw ConfigError("checkpoint tensor mismatch at " + p->name);
    p->value = std::move(m);
  }
  auto bufs = model.buffers();
  if (r.pod<std::uint32_t>() != bufs.size()) throw ConfigError("checkpoint buffer count mismatch");
  for (auto& b : bufs) {
    r.str();
    nn::Mat<Scalar> m = r.template mat<Scalar>();
    if (m.rows() != b.value->rows() || m.cols() != b.value->cols()) throw ConfigError("checkpoint buffer mismatch");
    *b.value = std::move(m);
  }
  const auto nopt = r.pod<std::uint32_t>();
  std::vector<nn::Mat<Scalar>> state;
  for (std::uint32_t i = 0; i < nopt; ++i) state.push_back(r.template mat<Scalar>());
  if (optimizer) {
    if (nopt != 0 && nopt != params.size()) throw ConfigError("checkpoint optimizer state mismatch");
    if (nopt != 0) optimizer->state() = std::move(state);
  }
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& file, const Classifier<Scalar>& model,
                     const SgdOptimizer<Scalar>* optimizer, const CheckpointInfo& info) {
  Writer w(file);
  w.raw(kMagic, sizeof kMagic);
  w.pod(kCheckpointVersion);
  w.pod(static_cast<std::uint32_t>(sizeof(Scalar)));
  w.pod(static_cast<std::uint32_t>(model.arch()));
  w.pod(static_cast<std::uint32_t>(model.num_classes()));
  w.pod(static_cast<std::uint32_t>(model.input_size()));
  w.pod(info.config_hash);
  w.pod(static_cast<std::int64_t>(info.step));
  w.str(info.rng_state);
  const auto params = model.parameters();
  w.pod(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.str(p->name);
    w.mat(p->value);
  }
  const auto bufs = model.buffers();
  w.pod(static_cast<std::uint32_t>(bufs.size()));
  for (const auto& b : bufs) {
    w.str(b.name);
    w.mat(*b.value);
  }
  if (optimizer) {
    w.pod(static_cast<std::uint32_t>(optimizer->state().size()));
    for (const auto& m : optimizer->state()) w.mat(m);
  } else {
    w.pod(std::uint32_t{0});
  }
  w.finish(file);
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& file) {
  Reader r(file);
  CheckpointInfo info = read_header<Scalar>(r);
  Checkpoint<Scalar> ck{info, Classifier<Scalar>(info.arch, info.num_classes, info.input_size, 0), {}};
  ck.optimizer = SgdOptimizer<Scalar>(ck.model);
  read_tensors(r, ck.model, &ck.optimizer);
  return ck;
}

template <typename Scalar>
CheckpointInfo load_weights_into(const std::filesystem::path& file, Classifier<Scalar>& model) {
  Reader r(file);
  CheckpointInfo info = read_header<Scalar>(r);
  if (info.arch != model.arch())
    throw ConfigError("checkpoint architecture " + arch_name(info.arch) + " does not match model " +
                      arch_name(model.arch()));
  if (info.num_classes != model.num_classes() || info.input_size != model.input_size())
    throw ConfigError("checkpoint class count or input size does not match model");
  read_tensors<Scalar>(r, model, nullptr);
  return info;
}

template void save_checkpoint<float>(const std::filesystem::path&, const Classifier<float>&,
                                     const SgdOptimizer<float>*, const CheckpointInfo&);
template void save_checkpoint<double>(const std::filesystem::path&, const Classifier<double>&,
                                      const SgdOptimizer<double>*, const CheckpointInfo&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);
template CheckpointInfo load_weights_into<float>(const std::filesystem::path&, Classifier<float>&);
template CheckpointInfo load_weights_into<double>(const std::filesystem::path&, Classifier<double>&);

}  // namespace rssl
