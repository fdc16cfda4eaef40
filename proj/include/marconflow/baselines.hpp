#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "marconflow/moses_model.hpp"

namespace marconflow {

/// A composable set of ablation flags. Names:
///   moses        full model
///   gmm          flows removed (conditional Gaussian mixture)
///   moses-sigma  isotropic base covariance
///   moses-w      uniform mixture weights
///   moses1       a single component
/// joined with '+', e.g. "gmm+moses1".
struct VariantSpec {
  VariantFlags flags;

  static VariantSpec parse(const std::string& name);
  std::string name() const;
  static std::vector<std::string> known_names();
};

/// The base hyperparameters with the variant flags applied; single_component
/// sets D = 1.
ModelConfig variant_config(ModelConfig base, const VariantSpec& spec);
MosesModel build_variant(const ModelConfig& base, const VariantSpec& spec, std::uint64_t seed);

}  // namespace marconflow
