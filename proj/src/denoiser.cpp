#include "cdp/denoiser.hpp"

namespace cdp {

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidConfig("denoiser config: " + msg); };
  if (d_model < 2 || n_heads < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_model % 2 != 0) fail("d_model must be even (sinusoidal embedding)");
  if (horizon < 1) fail("horizon must be >= 1");
  if (action_dim != kActionDim) fail("action_dim must be " + std::to_string(kActionDim));
  if (n_arms < 1) fail("n_arms must be >= 1");
  if (n_diffusion_steps < 2) fail("n_diffusion_steps must be >= 2");
  if (patch_size < 1 || grid_size < patch_size || grid_size % patch_size != 0) {
    fail("grid_size must be a positive multiple of patch_size");
  }
  if (n_encoder_layers < 0 || n_decoder_layers < 1 || mlp_ratio < 1) fail("layer counts out of range");
}

template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace cdp
