#include "marconflow/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "marconflow/errors.hpp"

namespace marconflow {

void EncoderConfig::validate() const {
  if (latent < 1 || time_features < 1 || heads < 1 || components < 1 || channels < 1) {
    throw ContractError("encoder sizes must be positive");
  }
  if (latent % heads != 0) throw ContractError("latent width must be divisible by the head count");
}

namespace {

Tensor normal_tensor(Shape shape, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

void add_attention_params(ParameterStore& ps, const std::string& prefix, std::size_t q_in, std::size_t kv_in,
                          std::size_t width, std::mt19937_64& rng) {
  auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  ps.add(prefix + ".wq", normal_tensor({q_in, width}, fan(q_in), rng));
  ps.add(prefix + ".bq", Tensor(Shape{width}, 0.0));
  ps.add(prefix + ".wk", normal_tensor({kv_in, width}, fan(kv_in), rng));
  ps.add(prefix + ".bk", Tensor(Shape{width}, 0.0));
  ps.add(prefix + ".wv", normal_tensor({kv_in, width}, fan(kv_in), rng));
  ps.add(prefix + ".bv", Tensor(Shape{width}, 0.0));
  ps.add(prefix + ".wo", normal_tensor({width, width}, fan(width), rng));
  ps.add(prefix + ".bo", Tensor(Shape{width}, 0.0));
}

// Multi-head attention with a query residual and a tanh feed-forward:
//   O = Qp + [softmax(Qp_h Kp_h^T / sqrt(d_h)) Vp_h]_h,  out = O + tanh(O Wo + bo)
Var attention_block(Tape& t, const std::string& prefix, Var q_in, Var kv_in, const std::vector<std::uint8_t>& key_mask,
                    std::size_t heads) {
  Var qp = matmul(q_in, t.param(prefix + ".wq")) + t.param(prefix + ".bq");
  Var kp = matmul(kv_in, t.param(prefix + ".wk")) + t.param(prefix + ".bk");
  Var vp = matmul(kv_in, t.param(prefix + ".wv")) + t.param(prefix + ".bv");
  const std::size_t width = qp.value().cols();
  const std::size_t dh = width / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> parts;
  parts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = qp, kh = kp, vh = vp;
    if (heads > 1) {
      std::vector<std::size_t> cols(dh);
      std::iota(cols.begin(), cols.end(), h * dh);
      qh = gather(qp, 1, cols);
      kh = gather(kp, 1, cols);
      vh = gather(vp, 1, cols);
    }
    Var att = softmax_masked(scale(matmul(qh, transpose(kh)), inv), key_mask);
    parts.push_back(matmul(att, vh));
  }
  Var o = qp + (heads > 1 ? concat(parts, 1) : parts[0]);
  return o + tanh(matmul(o, t.param(prefix + ".wo")) + t.param(prefix + ".bo"));
}

Tensor onehot(const Tensor& rows, std::size_t col, std::size_t stride, std::size_t channels) {
  const std::size_t n = rows.size() / stride;
  Tensor out(Shape{n, channels}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = rows[i * stride + col];
    if (c == 0.0) continue;  // padding row
    if (c < 1 || c > static_cast<double>(channels) || c != std::floor(c)) {
      throw ContractError("channel id " + std::to_string(c) + " outside 1.." + std::to_string(channels));
    }
    out(i, static_cast<std::size_t>(c) - 1) = 1.0;
  }
  return out;
}

Tensor column(const Tensor& rows, std::size_t col, std::size_t stride) {
  const std::size_t n = rows.size() / stride;
  Tensor out(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) out[i] = rows[i * stride + col];
  return out;
}

}  // namespace

void init_encoder_params(ParameterStore& ps, const EncoderConfig& c, std::mt19937_64& rng) {
  c.validate();
  const std::size_t m = c.latent, f = c.time_features;
  Tensor a(Shape{f}), b(Shape{f}, 0.0);
  // frequencies log-spaced over [0.1, 100]
  for (std::size_t i = 0; i < f; ++i) {
    const double frac = f > 1 ? static_cast<double>(i) / static_cast<double>(f - 1) : 0.0;
    a[i] = std::pow(10.0, -1.0 + 3.0 * frac);
  }
  ps.add("pos.a", a);
  ps.add("pos.b", b);
  add_attention_params(ps, "obs", f + c.channels + 1, f + c.channels + 1, m, rng);
  add_attention_params(ps, "qry", f + c.channels, m, c.components * m, rng);
  if (c.mixer) {
    add_attention_params(ps, "mix", m, m, m, rng);
    ps.add("beta", normal_tensor({c.components, m}, 1.0 / std::sqrt(static_cast<double>(m)), rng));
    ps.add("mix.proj", normal_tensor({m, 1}, 1.0 / std::sqrt(static_cast<double>(m)), rng));
  }
  if (c.null_token) ps.add("null_token", normal_tensor({1, m}, 1.0 / std::sqrt(static_cast<double>(m)), rng));
}

std::size_t EncoderInput::valid_queries() const {
  return static_cast<std::size_t>(std::count(query_mask.begin(), query_mask.end(), 1));
}

std::vector<std::size_t> EncoderInput::valid_query_rows() const {
  std::vector<std::size_t> rows;
  for (std::size_t k = 0; k < query_mask.size(); ++k)
    if (query_mask[k]) rows.push_back(k);
  return rows;
}

EncoderInput encoder_input(const TimeSeriesInstance& inst) {
  EncoderInput in;
  in.context = Tensor(Shape{inst.n_context(), 3});
  for (std::size_t i = 0; i < inst.n_context(); ++i) {
    in.context(i, 0) = inst.context[i].t;
    in.context(i, 1) = static_cast<double>(inst.context[i].channel);
    in.context(i, 2) = inst.context[i].value;
  }
  in.context_mask.assign(inst.n_context(), 1);
  in.query = Tensor(Shape{inst.n_query(), 2});
  for (std::size_t k = 0; k < inst.n_query(); ++k) {
    in.query(k, 0) = inst.query[k].t;
    in.query(k, 1) = static_cast<double>(inst.query[k].channel);
  }
  in.query_mask.assign(inst.n_query(), 1);
  in.answer = inst.answer;
  return in;
}

EncoderInput encoder_input(const Batch& batch, std::size_t row) {
  EncoderInput in;
  const std::size_t n = batch.n_max, k = batch.k_max;
  const auto ctx = batch.context.data().subspan(row * n * 3, n * 3);
  in.context = Tensor(Shape{n, 3}, std::vector<double>(ctx.begin(), ctx.end()));
  in.context_mask.assign(batch.context_mask.begin() + static_cast<std::ptrdiff_t>(row * n),
                         batch.context_mask.begin() + static_cast<std::ptrdiff_t>((row + 1) * n));
  const auto qry = batch.query.data().subspan(row * k * 2, k * 2);
  in.query = Tensor(Shape{k, 2}, std::vector<double>(qry.begin(), qry.end()));
  in.query_mask.assign(batch.query_mask.begin() + static_cast<std::ptrdiff_t>(row * k),
                       batch.query_mask.begin() + static_cast<std::ptrdiff_t>((row + 1) * k));
  const auto ans = batch.answer.data().subspan(row * k, k);
  in.answer.assign(ans.begin(), ans.end());
  return in;
}

Var posembed(Tape& t, Var times) {
  Var a = t.param("pos.a");
  const std::size_t f = a.value().size();
  Var lin = matmul(times, reshape(a, {1, f})) + t.param("pos.b");
  if (f == 1) return lin;
  std::vector<std::size_t> rest(f - 1);
  std::iota(rest.begin(), rest.end(), 1);
  return concat({gather(lin, 1, {0}), sin(gather(lin, 1, rest))}, 1);
}

std::vector<double> posembed(std::span<const double> a, std::span<const double> b, double t) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = i == 0 ? a[i] * t + b[i] : std::sin(a[i] * t + b[i]);
  return out;
}

Var embed_context(Tape& t, const EncoderConfig& c, const Tensor& context) {
  if (context.rank() != 2 || context.cols() != 3) throw ContractError("context must be N x 3");
  Var pe = posembed(t, t.constant(column(context, 0, 3)));
  return concat({pe, t.constant(onehot(context, 1, 3, c.channels)), t.constant(column(context, 2, 3))}, 1);
}

Var embed_query(Tape& t, const EncoderConfig& c, const Tensor& query) {
  if (query.rank() != 2 || query.cols() != 2) throw ContractError("query must be K x 2");
  Var pe = posembed(t, t.constant(column(query, 0, 2)));
  return concat({pe, t.constant(onehot(query, 1, 2, c.channels))}, 1);
}

LatentVars encode(Tape& t, const EncoderConfig& c, const EncoderInput& in) {
  if (in.query.rows() == 0 || in.valid_queries() == 0) throw ContractError("encode: no query rows");
  const bool has_context = std::count(in.context_mask.begin(), in.context_mask.end(), 1) > 0;
  LatentVars out;
  std::vector<std::uint8_t> key_mask;
  if (has_context) {
    Var tokens = embed_context(t, c, in.context);
    out.h_obs = attention_block(t, "obs", tokens, tokens, in.context_mask, c.heads);
    key_mask = in.context_mask;
  } else {
    if (!c.null_token) throw ContractError("encode: empty context without a null token");
    out.h_obs = t.param("null_token");
    key_mask = {1};
  }
  out.h_query = attention_block(t, "qry", embed_query(t, c, in.query), out.h_obs, key_mask, c.heads);
  if (c.mixer) {
    Var mixed = attention_block(t, "mix", t.param("beta"), out.h_obs, key_mask, c.heads);
    out.weight_logits = reshape(matmul(mixed, t.param("mix.proj")), {c.components});
  }
  return out;
}

Var component_codes(Var h_query, std::size_t d, std::size_t latent) {
  const std::size_t width = h_query.value().cols();
  if (width == latent) return h_query;
  if ((d + 1) * latent > width) throw ContractError("component index out of range");
  std::vector<std::size_t> cols(latent);
  std::iota(cols.begin(), cols.end(), d * latent);
  return gather(h_query, 1, cols);
}

}  // namespace marconflow
