#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdp/autodiff.hpp"
#include "cdp/types.hpp"

namespace cdp {

struct DenoiserConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_encoder_layers = 2;
  int n_decoder_layers = 3;
  int horizon = 48;
  int action_dim = kActionDim;  ///< per arm
  int n_arms = 1;
  int n_diffusion_steps = 100;
  int patch_size = 6;
  int grid_size = 24;
  int mlp_ratio = 4;
  bool positional_embeddings = true;

  int action_width() const { return action_dim * n_arms; }
  int patches_per_side() const { return grid_size / patch_size; }
  int patches_per_frame() const { return patches_per_side() * patches_per_side(); }
  int tokens_per_frame() const { return patches_per_frame() + 2 * n_arms; }
  int observation_tokens() const { return 2 * tokens_per_frame(); }

  /// Throws InvalidConfig.
  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

/// Ordered named tensors.
template <typename Scalar>
class ParameterSet {
 public:
  int add(std::string name, ad::Matrix<Scalar> init) {
    index_.emplace(name, static_cast<int>(tensors_.size()));
    names_.push_back(std::move(name));
    tensors_.push_back({std::move(init), true});
    return static_cast<int>(tensors_.size() - 1);
  }

  ad::Tensor<Scalar>& operator[](int i) { return tensors_[static_cast<std::size_t>(i)]; }
  const ad::Tensor<Scalar>& operator[](int i) const { return tensors_[static_cast<std::size_t>(i)]; }
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  int index(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  int size() const { return static_cast<int>(tensors_.size()); }
  std::span<ad::Tensor<Scalar>> tensors() { return tensors_; }
  std::span<const ad::Tensor<Scalar>> tensors() const { return tensors_; }

  long long scalar_count() const {
    long long n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor<Scalar>> tensors_;
  std::unordered_map<std::string, int> index_;
};

/// Lazily binds parameters into one Graph and collects their gradients.
template <typename Scalar>
class BoundParameters {
 public:
  BoundParameters(ad::Graph<Scalar>& graph, const ParameterSet<Scalar>& params)
      : graph_(graph), params_(params), vars_(static_cast<std::size_t>(params.size())) {}

  ad::Var<Scalar> operator()(int i) {
    auto& v = vars_[static_cast<std::size_t>(i)];
    if (!v.valid()) v = graph_.parameter(params_[i]);
    return v;
  }
  ad::Graph<Scalar>& graph() { return graph_; }

  /// Gradients in parameter order (zeros for parameters never used).
  std::vector<ad::Matrix<Scalar>> gradients() const {
    std::vector<ad::Matrix<Scalar>> out;
    out.reserve(vars_.size());
    for (int i = 0; i < params_.size(); ++i) {
      const auto& v = vars_[static_cast<std::size_t>(i)];
      if (v.valid() && v.requires_grad()) {
        out.push_back(v.grad());
      } else {
        out.push_back(ad::Matrix<Scalar>::Zero(params_[i].rows(), params_[i].cols()));
      }
    }
    return out;
  }

 private:
  ad::Graph<Scalar>& graph_;
  const ParameterSet<Scalar>& params_;
  std::vector<ad::Var<Scalar>> vars_;
};

/// Normalized observations of a batch, laid out for the encoder.
template <typename Scalar>
struct ObservationBatch {
  int batch = 0;
  ad::Matrix<Scalar> patches;   ///< [batch * 2 * patches_per_frame, patch^2]
  ad::Matrix<Scalar> poses;     ///< [batch * 2 * n_arms, 9]
  ad::Matrix<Scalar> wrenches;  ///< [batch * 2 * n_arms, 6]
};

/// Throws ShapeMismatch if the grid or arm count disagrees with the config.
template <typename Scalar>
ObservationBatch<Scalar> make_observation_batch(std::span<const Observation> obs, const DenoiserConfig& cfg);

/// Sinusoidal embedding of diffusion steps, [steps.size(), dim].
template <typename Scalar>
ad::Matrix<Scalar> timestep_embedding(std::span<const int> steps, int dim);

struct ModelSummary {
  long long parameters = 0;
  long long encoder_parameters = 0;
  long long decoder_parameters = 0;
  int tensors = 0;
};

/// Conditional x0-predicting denoiser: transformer encoder over observation
/// tokens, transformer decoder (self + cross attention) over the noisy chunk.
template <typename Scalar>
class Denoiser {
 public:
  using Mat = ad::Matrix<Scalar>;

  explicit Denoiser(DenoiserConfig cfg, std::uint64_t init_seed = 0);

  const DenoiserConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

  /// Observation tokens after the encoder, [batch * observation_tokens, d].
  ad::Var<Scalar> encode(BoundParameters<Scalar>& p, const ObservationBatch<Scalar>& obs) const;

  /// Clean-chunk estimate, [batch * H, action_width]. `memory` comes from
  /// encode() on the same graph or is a constant of encoded tokens.
  ad::Var<Scalar> decode(BoundParameters<Scalar>& p, ad::Var<Scalar> memory, const Mat& noisy,
                         std::span<const int> steps) const;

  /// Single observation, inference only. Returns [observation_tokens, d].
  Mat encode_observation(const Observation& normalized) const;

  /// Single chunk, inference only. Throws StepOutOfRange for n outside [0, N].
  Mat predict_clean_chunk(const Mat& noisy, int n, const Mat& tokens) const;

  ModelSummary summary() const;

 private:
  struct Linear {
    int w = -1, b = -1;
  };
  struct Norm {
    int gain = -1, bias = -1;
  };
  struct Attention {
    Linear q, k, v, out;
  };
  struct Mlp {
    Linear in, out;
  };
  struct EncoderLayer {
    Norm ln1, ln2;
    Attention attn;
    Mlp mlp;
  };
  struct DecoderLayer {
    Norm ln1, ln2, ln3;
    Attention self_attn, cross_attn;
    Mlp mlp;
  };

  Linear make_linear(const std::string& name, int in, int out, std::mt19937_64& rng);
  Norm make_norm(const std::string& name, int width);
  Attention make_attention(const std::string& name, std::mt19937_64& rng);
  Mlp make_mlp(const std::string& name, std::mt19937_64& rng);
  int make_embedding(const std::string& name, int rows, std::mt19937_64& rng);

  ad::Var<Scalar> linear(BoundParameters<Scalar>& p, const Linear& l, ad::Var<Scalar> x) const;
  ad::Var<Scalar> norm(BoundParameters<Scalar>& p, const Norm& n, ad::Var<Scalar> x) const;
  ad::Var<Scalar> attend(BoundParameters<Scalar>& p, const Attention& a, ad::Var<Scalar> xq, ad::Var<Scalar> xkv,
                         int batch) const;
  ad::Var<Scalar> mlp(BoundParameters<Scalar>& p, const Mlp& m, ad::Var<Scalar> x) const;
  void check_step(int n) const;

  DenoiserConfig cfg_;
  ParameterSet<Scalar> params_;
  int encoder_param_end_ = 0;

  Linear patch_embed_, pose_embed_, wrench_embed_;
  int obs_pos_ = -1, frame_embed_ = -1;
  std::vector<EncoderLayer> encoder_;
  Norm encoder_norm_;

  Linear action_in_;
  int action_pos_ = -1;
  Linear time_in_, time_out_;
  std::vector<DecoderLayer> decoder_;
  Norm decoder_norm_;
  Linear action_out_;
};

extern template class Denoiser<float>;
extern template class Denoiser<double>;

// ---------------------------------------------------------------------------

template <typename Scalar>
ObservationBatch<Scalar> make_observation_batch(std::span<const Observation> obs, const DenoiserConfig& cfg) {
  const int b = static_cast<int>(obs.size());
  const int p = cfg.patch_size, side = cfg.patches_per_side(), ppf = cfg.patches_per_frame(), arms = cfg.n_arms;
  ObservationBatch<Scalar> out;
  out.batch = b;
  out.patches.resize(static_cast<Eigen::Index>(b) * 2 * ppf, p * p);
  out.poses.resize(static_cast<Eigen::Index>(b) * 2 * arms, kPoseDim);
  out.wrenches.resize(static_cast<Eigen::Index>(b) * 2 * arms, kWrenchDim);
  for (int i = 0; i < b; ++i) {
    const ObservationFrame* frames[2] = {&obs[static_cast<std::size_t>(i)].previous,
                                         &obs[static_cast<std::size_t>(i)].current};
    for (int f = 0; f < 2; ++f) {
      const auto& fr = *frames[f];
      if (fr.grid.rows() != cfg.grid_size || fr.grid.cols() != cfg.grid_size) {
        throw ShapeMismatch("observation grid " + ad::shape_string(fr.grid.rows(), fr.grid.cols()) +
                            " does not match configured grid " + ad::shape_string(cfg.grid_size, cfg.grid_size));
      }
      if (static_cast<int>(fr.poses.size()) != arms || static_cast<int>(fr.wrenches.size()) != arms) {
        throw ShapeMismatch("observation carries " + std::to_string(fr.poses.size()) + " arms, configured " +
                            std::to_string(arms));
      }
      for (int py = 0; py < side; ++py) {
        for (int px = 0; px < side; ++px) {
          const Eigen::Index row = (static_cast<Eigen::Index>(i) * 2 + f) * ppf + py * side + px;
          for (int r = 0; r < p; ++r) {
            for (int c = 0; c < p; ++c) {
              out.patches(row, r * p + c) = static_cast<Scalar>(fr.grid(py * p + r, px * p + c));
            }
          }
        }
      }
      for (int a = 0; a < arms; ++a) {
        const Eigen::Index row = (static_cast<Eigen::Index>(i) * 2 + f) * arms + a;
        out.poses.row(row) = fr.poses[static_cast<std::size_t>(a)].transpose().template cast<Scalar>();
        out.wrenches.row(row) = fr.wrenches[static_cast<std::size_t>(a)].transpose().template cast<Scalar>();
      }
    }
  }
  return out;
}

template <typename Scalar>
ad::Matrix<Scalar> timestep_embedding(std::span<const int> steps, int dim) {
  const int half = dim / 2;
  ad::Matrix<Scalar> out = ad::Matrix<Scalar>::Zero(static_cast<Eigen::Index>(steps.size()), dim);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / std::max(half, 1));
      const double arg = steps[i] * freq;
      out(static_cast<Eigen::Index>(i), k) = static_cast<Scalar>(std::sin(arg));
      out(static_cast<Eigen::Index>(i), half + k) = static_cast<Scalar>(std::cos(arg));
    }
  }
  return out;
}

template <typename Scalar>
Denoiser<Scalar>::Denoiser(DenoiserConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(init_seed);
  const int d = cfg_.d_model;

  patch_embed_ = make_linear("enc.patch", cfg_.patch_size * cfg_.patch_size, d, rng);
  pose_embed_ = make_linear("enc.pose", kPoseDim, d, rng);
  wrench_embed_ = make_linear("enc.wrench", kWrenchDim, d, rng);
  if (cfg_.positional_embeddings) obs_pos_ = make_embedding("enc.pos", cfg_.tokens_per_frame(), rng);
  frame_embed_ = make_embedding("enc.frame", 2, rng);
  for (int l = 0; l < cfg_.n_encoder_layers; ++l) {
    const std::string pre = "enc.L" + std::to_string(l);
    EncoderLayer layer;
    layer.ln1 = make_norm(pre + ".ln1", d);
    layer.attn = make_attention(pre + ".attn", rng);
    layer.ln2 = make_norm(pre + ".ln2", d);
    layer.mlp = make_mlp(pre + ".mlp", rng);
    encoder_.push_back(layer);
  }
  encoder_norm_ = make_norm("enc.ln_f", d);
  encoder_param_end_ = params_.size();

  action_in_ = make_linear("dec.in", cfg_.action_width(), d, rng);
  if (cfg_.positional_embeddings) action_pos_ = make_embedding("dec.pos", cfg_.horizon, rng);
  time_in_ = make_linear("dec.time.fc1", d, d, rng);
  time_out_ = make_linear("dec.time.fc2", d, d, rng);
  for (int l = 0; l < cfg_.n_decoder_layers; ++l) {
    const std::string pre = "dec.L" + std::to_string(l);
    DecoderLayer layer;
    layer.ln1 = make_norm(pre + ".ln1", d);
    layer.self_attn = make_attention(pre + ".self", rng);
    layer.ln2 = make_norm(pre + ".ln2", d);
    layer.cross_attn = make_attention(pre + ".cross", rng);
    layer.ln3 = make_norm(pre + ".ln3", d);
    layer.mlp = make_mlp(pre + ".mlp", rng);
    decoder_.push_back(layer);
  }
  decoder_norm_ = make_norm("dec.ln_f", d);
  action_out_ = make_linear("dec.out", d, cfg_.action_width(), rng);
}

template <typename Scalar>
typename Denoiser<Scalar>::Linear Denoiser<Scalar>::make_linear(const std::string& name, int in, int out,
                                                                std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(u(rng));
  Linear l;
  l.w = params_.add(name + ".w", std::move(w));
  l.b = params_.add(name + ".b", Mat::Zero(1, out));
  return l;
}

template <typename Scalar>
typename Denoiser<Scalar>::Norm Denoiser<Scalar>::make_norm(const std::string& name, int width) {
  Norm n;
  n.gain = params_.add(name + ".g", Mat::Ones(1, width));
  n.bias = params_.add(name + ".b", Mat::Zero(1, width));
  return n;
}

template <typename Scalar>
typename Denoiser<Scalar>::Attention Denoiser<Scalar>::make_attention(const std::string& name, std::mt19937_64& rng) {
  const int d = cfg_.d_model;
  Attention a;
  a.q = make_linear(name + ".q", d, d, rng);
  a.k = make_linear(name + ".k", d, d, rng);
  a.v = make_linear(name + ".v", d, d, rng);
  a.out = make_linear(name + ".o", d, d, rng);
  return a;
}

template <typename Scalar>
typename Denoiser<Scalar>::Mlp Denoiser<Scalar>::make_mlp(const std::string& name, std::mt19937_64& rng) {
  const int d = cfg_.d_model;
  Mlp m;
  m.in = make_linear(name + ".fc1", d, cfg_.mlp_ratio * d, rng);
  m.out = make_linear(name + ".fc2", cfg_.mlp_ratio * d, d, rng);
  return m;
}

template <typename Scalar>
int Denoiser<Scalar>::make_embedding(const std::string& name, int rows, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.02, 0.02);
  Mat e(rows, cfg_.d_model);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<Scalar>(u(rng));
  return params_.add(name, std::move(e));
}

template <typename Scalar>
ad::Var<Scalar> Denoiser<Scalar>::linear(BoundParameters<Scalar>& p, const Linear& l, ad::Var<Scalar> x) const {
  return ad::add_rowwise(ad::matmul(x, p(l.w)), p(l.b));
}

template <typename Scalar>
ad::Var<Scalar> Denoiser<Scalar>::norm(BoundParameters<Scalar>& p, const Norm& n, ad::Var<Scalar> x) const {
  return ad::add_rowwise(ad::mul_rowwise(ad::layer_norm(x), p(n.gain)), p(n.bias));
}

template <typename Scalar>
ad::Var<Scalar> Denoiser<Scalar>::attend(BoundParameters<Scalar>& p, const Attention& a, ad::Var<Scalar> xq,
                                         ad::Var<Scalar> xkv, int batch) const {
  auto q = linear(p, a.q, xq);
  auto k = linear(p, a.k, xkv);
  auto v = linear(p, a.v, xkv);
  return linear(p, a.out, ad::attention(q, k, v, cfg_.n_heads, batch));
}

template <typename Scalar>
ad::Var<Scalar> Denoiser<Scalar>::mlp(BoundParameters<Scalar>& p, const Mlp& m, ad::Var<Scalar> x) const {
  return linear(p, m.out, ad::gelu(linear(p, m.in, x)));
}

template <typename Scalar>
void Denoiser<Scalar>::check_step(int n) const {
  if (n < 0 || n > cfg_.n_diffusion_steps) {
    throw StepOutOfRange("denoiser step " + std::to_string(n) + " outside [0, " +
                         std::to_string(cfg_.n_diffusion_steps) + "]");
  }
}

template <typename Scalar>
ad::Var<Scalar> Denoiser<Scalar>::encode(BoundParameters<Scalar>& p, const ObservationBatch<Scalar>& obs) const {
  auto& g = p.graph();
  const int b = obs.batch, ppf = cfg_.patches_per_frame(), arms = cfg_.n_arms, tpf = cfg_.tokens_per_frame();
  if (obs.patches.rows() != static_cast<Eigen::Index>(b) * 2 * ppf ||
      obs.patches.cols() != cfg_.patch_size * cfg_.patch_size) {
    throw ShapeMismatch("encode: patch matrix " + ad::shape_string(obs.patches.rows(), obs.patches.cols()) +
                        " does not match config");
  }
  auto patches = linear(p, patch_embed_, g.constant(obs.patches));
  auto poses = linear(p, pose_embed_, g.constant(obs.poses));
  auto wrenches = linear(p, wrench_embed_, g.constant(obs.wrenches));
  auto all = ad::concat({patches, poses, wrenches}, 0);

  // Per sample and frame: [patches..., pose_0..pose_{A-1}, wrench_0..wrench_{A-1}].
  const int pose_base = b * 2 * ppf, wrench_base = pose_base + b * 2 * arms;
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(b) * 2 * tpf);
  for (int i = 0; i < b; ++i) {
    for (int f = 0; f < 2; ++f) {
      for (int j = 0; j < ppf; ++j) order.push_back((i * 2 + f) * ppf + j);
      for (int a = 0; a < arms; ++a) order.push_back(pose_base + (i * 2 + f) * arms + a);
      for (int a = 0; a < arms; ++a) order.push_back(wrench_base + (i * 2 + f) * arms + a);
    }
  }
  auto x = ad::embedding_lookup(all, std::move(order));

  auto position = ad::repeat_rows(p(frame_embed_), tpf);
  if (obs_pos_ >= 0) position = ad::add(position, ad::tile_rows(p(obs_pos_), 2));
  x = ad::add(x, ad::tile_rows(position, b));

  for (const auto& layer : encoder_) {
    auto h = norm(p, layer.ln1, x);
    x = ad::add(x, attend(p, layer.attn, h, h, b));
    x = ad::add(x, mlp(p, layer.mlp, norm(p, layer.ln2, x)));
  }
  return norm(p, encoder_norm_, x);
}

template <typename Scalar>
ad::Var<Scalar> Denoiser<Scalar>::decode(BoundParameters<Scalar>& p, ad::Var<Scalar> memory, const Mat& noisy,
                                         std::span<const int> steps) const {
  auto& g = p.graph();
  const int b = static_cast<int>(steps.size());
  const int h = cfg_.horizon;
  if (noisy.rows() != static_cast<Eigen::Index>(b) * h || noisy.cols() != cfg_.action_width()) {
    throw ShapeMismatch("decode: noisy chunk " + ad::shape_string(noisy.rows(), noisy.cols()) + ", expected " +
                        ad::shape_string(static_cast<Eigen::Index>(b) * h, cfg_.action_width()));
  }
  if (memory.rows() != static_cast<Eigen::Index>(b) * cfg_.observation_tokens() || memory.cols() != cfg_.d_model) {
    throw ShapeMismatch("decode: memory " + ad::shape_string(memory.rows(), memory.cols()) + ", expected " +
                        ad::shape_string(static_cast<Eigen::Index>(b) * cfg_.observation_tokens(), cfg_.d_model));
  }
  for (int n : steps) check_step(n);

  auto time = linear(p, time_out_, ad::gelu(linear(p, time_in_, g.constant(timestep_embedding<Scalar>(steps, cfg_.d_model)))));
  auto x = linear(p, action_in_, g.constant(noisy));
  if (action_pos_ >= 0) x = ad::add(x, ad::tile_rows(p(action_pos_), b));
  x = ad::add(x, ad::repeat_rows(time, h));

  for (const auto& layer : decoder_) {
    auto s = norm(p, layer.ln1, x);
    x = ad::add(x, attend(p, layer.self_attn, s, s, b));
    x = ad::add(x, attend(p, layer.cross_attn, norm(p, layer.ln2, x), memory, b));
    x = ad::add(x, mlp(p, layer.mlp, norm(p, layer.ln3, x)));
  }
  return linear(p, action_out_, norm(p, decoder_norm_, x));
}

template <typename Scalar>
typename Denoiser<Scalar>::Mat Denoiser<Scalar>::encode_observation(const Observation& normalized) const {
  ad::Graph<Scalar> g(false);
  BoundParameters<Scalar> p(g, params_);
  auto batch = make_observation_batch<Scalar>(std::span<const Observation>(&normalized, 1), cfg_);
  return encode(p, batch).value();
}

template <typename Scalar>
typename Denoiser<Scalar>::Mat Denoiser<Scalar>::predict_clean_chunk(const Mat& noisy, int n, const Mat& tokens) const {
  check_step(n);
  ad::Graph<Scalar> g(false);
  BoundParameters<Scalar> p(g, params_);
  const int steps[1] = {n};
  return decode(p, g.constant(tokens), noisy, steps).value();
}

template <typename Scalar>
ModelSummary Denoiser<Scalar>::summary() const {
  ModelSummary s;
  s.tensors = params_.size();
  for (int i = 0; i < params_.size(); ++i) {
    const long long n = params_[i].size();
    s.parameters += n;
    (i < encoder_param_end_ ? s.encoder_parameters : s.decoder_parameters) += n;
  }
  return s;
}

}  // namespace cdp
