#include "marconflow/baselines.hpp"

#include <sstream>

#include "marconflow/errors.hpp"

namespace marconflow {

VariantSpec VariantSpec::parse(const std::string& name) {
  VariantSpec s;
  std::stringstream in(name);
  std::string part;
  bool any = false;
  while (std::getline(in, part, '+')) {
    any = true;
    if (part == "moses") continue;
    if (part == "gmm") s.flags.disable_flows = true;
    else if (part == "moses-sigma") s.flags.identity_covariance = true;
    else if (part == "moses-w") s.flags.uniform_weights = true;
    else if (part == "moses1") s.flags.single_component = true;
    else throw ValidationError("unknown variant '" + part + "'");
  }
  if (!any) throw ValidationError("empty variant name");
  return s;
}

std::string VariantSpec::name() const {
  std::string out;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += n;
  };
  add(flags.disable_flows, "gmm");
  add(flags.identity_covariance, "moses-sigma");
  add(flags.uniform_weights, "moses-w");
  add(flags.single_component, "moses1");
  return out.empty() ? "moses" : out;
}

std::vector<std::string> VariantSpec::known_names() { return {"moses", "gmm", "moses-sigma", "moses-w", "moses1"}; }

ModelConfig variant_config(ModelConfig base, const VariantSpec& spec) {
  base.variant = spec.flags;
  if (spec.flags.single_component) base.components = 1;
  base.validate();
  return base;
}

MosesModel build_variant(const ModelConfig& base, const VariantSpec& spec, std::uint64_t seed) {
  return make_model(variant_config(base, spec), seed);
}

}  // namespace marconflow
