#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "marconflow/tensor.hpp"

namespace marconflow {

/// Named trainable tensors, ordered by name.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return values_.count(name) > 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::vector<std::string> names() const;
  std::size_t scalar_count() const;

  const std::map<std::string, Tensor>& all() const { return values_; }
  std::map<std::string, Tensor>& all() { return values_; }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) { return a.values_ == b.values_; }

 private:
  std::map<std::string, Tensor> values_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamConfig config = {});

  /// Throws NumericalError naming the first parameter whose gradient is non-finite.
  void step(ParameterStore& params, const std::map<std::string, Tensor>& grads);

  std::int64_t step_count() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }
  void restore(std::int64_t steps, std::map<std::string, Tensor> m, std::map<std::string, Tensor> v);

 private:
  AdamConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

/// Flat binary archive: name -> shape + little-endian float64 payload.
void write_tensor_archive(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> read_tensor_archive(const std::filesystem::path& path);

}  // namespace marconflow
