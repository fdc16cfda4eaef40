#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "marconflow/parameters.hpp"
#include "marconflow/series_io.hpp"
#include "marconflow/tape.hpp"

namespace marconflow {

struct EncoderConfig {
  std::size_t latent = 16;          // M
  std::size_t time_features = 16;   // F
  std::size_t heads = 2;            // H, divides M
  std::size_t components = 1;       // D
  std::size_t channels = 1;         // C
  bool null_token = false;          // learned stand-in for an empty context
  bool mixer = true;                // false: no weight path (uniform weights)

  void validate() const;
};

/// Adds pos.*, obs.*, qry.* and, when enabled, mix.*, beta and null_token.
void init_encoder_params(ParameterStore& params, const EncoderConfig& config, std::mt19937_64& rng);

/// Raw triplets, possibly padded. Masked context rows never influence outputs.
struct EncoderInput {
  Tensor context;                        // N x 3: t, c, v
  std::vector<std::uint8_t> context_mask;
  Tensor query;                          // K x 2: t, c
  std::vector<std::uint8_t> query_mask;
  std::vector<double> answer;            // K, may be empty when only encoding

  std::size_t valid_queries() const;
  std::vector<std::size_t> valid_query_rows() const;
};

EncoderInput encoder_input(const TimeSeriesInstance& inst);
EncoderInput encoder_input(const Batch& batch, std::size_t row);

struct LatentVars {
  Var h_obs;          // N x M (1 x M for the null token)
  Var h_query;        // K x D*M
  Var weight_logits;  // D; unbound without a mixer
};

/// [a_0 t + b_0, sin(a_f t + b_f) ...] for a column of times (n x 1) -> n x F.
Var posembed(Tape& tape, Var times);
std::vector<double> posembed(std::span<const double> a, std::span<const double> b, double t);

/// Context tokens n x (F + C + 1) and query tokens k x (F + C).
Var embed_context(Tape& tape, const EncoderConfig& config, const Tensor& context);
Var embed_query(Tape& tape, const EncoderConfig& config, const Tensor& query);

LatentVars encode(Tape& tape, const EncoderConfig& config, const EncoderInput& input);

/// Rows of h_query for component d: K x M.
Var component_codes(Var h_query, std::size_t d, std::size_t latent);

}  // namespace marconflow
