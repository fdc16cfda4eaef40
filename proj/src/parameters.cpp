#include "marconflow/parameters.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "marconflow/errors.hpp"

namespace marconflow {

void ParameterStore::add(const std::string& name, Tensor value) {
  if (!values_.emplace(name, std::move(value)).second) throw ContractError("duplicate parameter '" + name + "'");
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(values_.size());
  for (const auto& [k, v] : values_) out.push_back(k);
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [k, v] : values_) n += v.size();
  return n;
}

Adam::Adam(AdamConfig config) : config_(config) {
  if (!(config_.lr > 0.0)) throw ContractError("Adam learning rate must be positive");
}

void Adam::step(ParameterStore& params, const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericalError("non-finite gradient for parameter '" + name + "'");
    if (g.shape() != params.at(name).shape()) throw ContractError("gradient shape mismatch for '" + name + "'");
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mit, m_new] = m_.try_emplace(name, Tensor(p.shape(), 0.0));
    auto [vit, v_new] = v_.try_emplace(name, Tensor(p.shape(), 0.0));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void Adam::restore(std::int64_t steps, std::map<std::string, Tensor> m, std::map<std::string, Tensor> v) {
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

namespace {

constexpr char kMagic[8] = {'M', 'C', 'F', 'L', 'O', 'W', '0', '1'};

template <class T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "archive IO assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw ValidationError("truncated tensor archive");
  return value;
}

}  // namespace

void write_tensor_archive(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_le<std::uint64_t>(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) write_le<std::uint64_t>(os, d);
    for (double v : t.data()) write_le<double>(os, v);
  }
  if (!os) throw ValidationError("failed writing '" + path.string() + "'");
}

std::map<std::string, Tensor> read_tensor_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open '" + path.string() + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError("'" + path.string() + "' is not a tensor archive");
  }
  const auto count = read_le<std::uint64_t>(is);
  std::map<std::string, Tensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = read_le<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = read_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = read_le<std::uint64_t>(is);
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = read_le<double>(is);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace marconflow
