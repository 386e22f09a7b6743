#include <doctest.h>

#include <random>

#include "cdp/denoiser.hpp"
#include "support/finite_difference.hpp"

using namespace cdp;
using MatD = ad::Matrix<double>;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.horizon = 3;
  c.n_diffusion_steps = 10;
  c.patch_size = 2;
  c.grid_size = 4;
  c.mlp_ratio = 2;
  return c;
}

// Parameter count written out layer by layer, independent of the model code.
long long expected_parameters(const DenoiserConfig& c) {
  const long long d = c.d_model, a = c.action_width(), r = c.mlp_ratio, p2 = c.patch_size * c.patch_size;
  const long long attn = 4 * (d * d + d), ln = 2 * d, mlp = 2 * r * d * d + r * d + d;
  long long enc = p2 * d + d + 9 * d + d + 6 * d + d + 2 * d;
  if (c.positional_embeddings) enc += static_cast<long long>(c.tokens_per_frame()) * d;
  enc += c.n_encoder_layers * (2 * ln + attn + mlp) + ln;
  long long dec = a * d + d + (2 * d * d + 2 * d) + c.n_decoder_layers * (3 * ln + 2 * attn + mlp) + ln + d * a + a;
  if (c.positional_embeddings) dec += static_cast<long long>(c.horizon) * d;
  return enc + dec;
}

Observation random_observation(const DenoiserConfig& c, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  auto frame = [&] {
    ObservationFrame f;
    f.grid = MatD::NullaryExpr(c.grid_size, c.grid_size, [&] { return n(rng); });
    for (int a = 0; a < c.n_arms; ++a) {
      f.poses.push_back(Vector9d::NullaryExpr([&] { return n(rng); }));
      f.wrenches.push_back(Vector6d::NullaryExpr([&] { return n(rng); }));
    }
    return f;
  };
  return {frame(), frame()};
}

}  // namespace

TEST_SUITE("denoiser") {
  TEST_CASE("without positional embeddings the decoder is equivariant to chunk row order") {
    auto c = tiny_config();
    c.horizon = 5;
    c.positional_embeddings = false;
    Denoiser<double> net(c, 11);
    std::mt19937_64 rng(12);
    const MatD tokens = net.encode_observation(random_observation(c, rng));
    const MatD noisy = MatD::Random(c.horizon, c.action_width());
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(c.horizon);
    perm.indices() << 3, 0, 4, 1, 2;
    const MatD a = net.predict_clean_chunk(noisy, 6, tokens);
    const MatD b = net.predict_clean_chunk(perm * noisy, 6, tokens);
    CHECK((perm * a - b).cwiseAbs().maxCoeff() < 1e-12);

    c.positional_embeddings = true;
    Denoiser<double> pos(c, 11);
    const MatD tp = pos.encode_observation(random_observation(c, rng));
    const MatD pa = pos.predict_clean_chunk(noisy, 6, tp);
    const MatD pb = pos.predict_clean_chunk(perm * noisy, 6, tp);
    CHECK((perm * pa - pb).cwiseAbs().maxCoeff() > 1e-6);
  }

  TEST_CASE("parameter count matches the layer-by-layer formula") {
    DenoiserConfig def;
    CHECK(Denoiser<float>(def).summary().parameters == expected_parameters(def));
    auto t = tiny_config();
    t.n_arms = 2;
    CHECK(Denoiser<double>(t).summary().parameters == expected_parameters(t));
    t.positional_embeddings = false;
    CHECK(Denoiser<double>(t).summary().parameters == expected_parameters(t));
  }

  TEST_CASE("config validation") {
    auto c = tiny_config();
    c.n_heads = 3;
    CHECK_THROWS_AS(Denoiser<double>{c}, InvalidConfig);
    c = tiny_config();
    c.grid_size = 5;
    CHECK_THROWS_AS(Denoiser<double>{c}, InvalidConfig);
  }

  TEST_CASE("patch extraction layout") {
    auto c = tiny_config();
    Observation o;
    o.previous.grid = MatD::Zero(4, 4);
    o.current.grid = MatD::NullaryExpr(4, 4, [](Eigen::Index i, Eigen::Index j) { return double(10 * i + j); });
    o.previous.poses = o.current.poses = {Vector9d::Zero()};
    o.previous.wrenches = o.current.wrenches = {Vector6d::Zero()};
    auto b = make_observation_batch<double>(std::span<const Observation>(&o, 1), c);
    CHECK(b.patches.rows() == 8);
    // Current frame, patch (row 1, col 0) covers grid rows 2..3, cols 0..1.
    CHECK(b.patches(4 + 2, 0) == 20);
    CHECK(b.patches(4 + 2, 1) == 21);
    CHECK(b.patches(4 + 2, 2) == 30);
    CHECK(b.patches(4 + 3, 3) == 33);

    o.current.grid = MatD::Zero(6, 6);
    CHECK_THROWS_AS(make_observation_batch<double>(std::span<const Observation>(&o, 1), c), ShapeMismatch);
  }

  TEST_CASE("inference output shape and step range") {
    auto c = tiny_config();
    Denoiser<double> net(c, 1);
    std::mt19937_64 rng(2);
    auto tokens = net.encode_observation(random_observation(c, rng));
    CHECK(tokens.rows() == c.observation_tokens());
    CHECK(tokens.cols() == c.d_model);
    MatD noisy = MatD::Random(c.horizon, c.action_width());
    auto out = net.predict_clean_chunk(noisy, 5, tokens);
    CHECK(out.rows() == c.horizon);
    CHECK(out.cols() == c.action_width());
    CHECK(out.allFinite());
    CHECK_NOTHROW(net.predict_clean_chunk(noisy, c.n_diffusion_steps, tokens));
    CHECK_THROWS_AS(net.predict_clean_chunk(noisy, -1, tokens), StepOutOfRange);
    CHECK_THROWS_AS(net.predict_clean_chunk(noisy, c.n_diffusion_steps + 1, tokens), StepOutOfRange);
    CHECK_THROWS_AS(net.predict_clean_chunk(MatD::Zero(2, 2), 1, tokens), ShapeMismatch);
  }

  TEST_CASE("batched forward equals per-sample forward") {
    auto c = tiny_config();
    c.n_arms = 2;
    Denoiser<double> net(c, 3);
    std::mt19937_64 rng(4);
    std::vector<Observation> obs{random_observation(c, rng), random_observation(c, rng)};
    MatD noisy = MatD::Random(2 * c.horizon, c.action_width());
    std::vector<int> steps{2, 9};
    ad::Graph<double> g(false);
    BoundParameters<double> p(g, net.parameters());
    auto mem = net.encode(p, make_observation_batch<double>(obs, c));
    auto out = net.decode(p, mem, noisy, steps).value();
    for (int i = 0; i < 2; ++i) {
      auto single = net.predict_clean_chunk(noisy.middleRows(i * c.horizon, c.horizon), steps[i],
                                            net.encode_observation(obs[i]));
      CHECK((single - out.middleRows(i * c.horizon, c.horizon)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("the observation changes the prediction") {
    auto c = tiny_config();
    Denoiser<double> net(c, 5);
    std::mt19937_64 rng(6);
    MatD noisy = MatD::Random(c.horizon, c.action_width());
    auto a = net.predict_clean_chunk(noisy, 3, net.encode_observation(random_observation(c, rng)));
    auto b = net.predict_clean_chunk(noisy, 3, net.encode_observation(random_observation(c, rng)));
    CHECK((a - b).norm() > 1e-6);
  }

  TEST_CASE("end-to-end parameter gradients match finite differences") {
    auto c = tiny_config();
    Denoiser<double> net(c, 7);
    std::mt19937_64 rng(8);
    std::vector<Observation> obs{random_observation(c, rng)};
    MatD noisy = MatD::Random(c.horizon, c.action_width());
    MatD target = MatD::Random(c.horizon, c.action_width());
    std::vector<int> steps{4};
    auto batch = make_observation_batch<double>(obs, c);
    auto loss_value = [&](bool grad, std::vector<MatD>* grads) {
      ad::Graph<double> g(grad);
      BoundParameters<double> p(g, net.parameters());
      auto pred = net.decode(p, net.encode(p, batch), noisy, steps);
      auto loss = ad::sum_sq(ad::sub(pred, g.constant(target)));
      if (grad) {
        g.backward(loss);
        *grads = p.gradients();
      }
      return loss.value()(0, 0);
    };
    std::vector<MatD> grads;
    loss_value(true, &grads);
    auto& params = net.parameters();
    for (const char* name : {"enc.patch.w", "enc.pose.w", "enc.frame", "enc.L0.attn.q.w", "dec.time.fc1.w",
                             "dec.L0.cross.k.w", "dec.L0.ln3.g", "dec.out.b"}) {
      CAPTURE(name);
      const int idx = params.index(name);
      REQUIRE(idx >= 0);
      auto& t = params[idx].value;
      MatD fd(t.rows(), t.cols());
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        const double x = t.data()[i];
        t.data()[i] = x + 1e-5;
        const double up = loss_value(false, nullptr);
        t.data()[i] = x - 1e-5;
        const double down = loss_value(false, nullptr);
        t.data()[i] = x;
        fd.data()[i] = (up - down) / 2e-5;
      }
      const auto& gr = grads[static_cast<std::size_t>(idx)];
      CHECK((gr - fd).norm() / std::max({gr.norm(), fd.norm(), 1e-8}) < 1e-4);
    }
  }
}
