#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "vlmkit/connector.h"

using namespace vlmkit;

namespace {

Tensor random_hidden(std::size_t rows, std::size_t dim, uint64_t seed) {
  Rng rng(seed);
  return random_normal({rows, dim}, 1.0, rng).detach();
}

ConnectorConfig config(ConnectorKind kind) {
  ConnectorConfig cfg;
  cfg.kind = kind;
  cfg.vision_dim = 8;
  cfg.text_dim = 12;
  cfg.latent_count = 5;
  cfg.shuffle_factor = 2;
  cfg.perceiver_heads = 2;
  return cfg;
}

}  // namespace

TEST_CASE("tokens per tile for each connector") {
  ConnectorConfig cfg;
  cfg.kind = ConnectorKind::pixel_shuffle;
  CHECK(cfg.tokens_per_tile(26, 26) == 169);
  cfg.shuffle_factor = 1;
  CHECK(cfg.tokens_per_tile(26, 26) == 676);
  cfg.kind = ConnectorKind::linear;
  CHECK(cfg.tokens_per_tile(26, 26) == 676);
  cfg.kind = ConnectorKind::perceiver;
  cfg.latent_count = 64;
  CHECK(cfg.tokens_per_tile(26, 26) == 64);
  cfg.kind = ConnectorKind::pixel_shuffle;
  cfg.shuffle_factor = 2;
  CHECK_THROWS_AS(cfg.tokens_per_tile(5, 4), DivisibilityError);
}

TEST_CASE("pixel shuffle places each neighbourhood in row-major order") {
  const std::size_t h = 4, w = 6, r = 2, d = 3;
  std::vector<double> v(h * w * d);
  for (std::size_t row = 0; row < h * w; ++row)
    for (std::size_t c = 0; c < d; ++c) v[row * d + c] = static_cast<double>(row * 10 + c);
  Tensor hidden = Tensor::from({h * w, d}, v);
  Tensor out = pixel_shuffle_reindex(hidden, h, w, r);
  CHECK(out.shape() == Shape{6, 12});
  for (std::size_t i = 0; i < h / r; ++i)
    for (std::size_t j = 0; j < w / r; ++j)
      for (std::size_t dy = 0; dy < r; ++dy)
        for (std::size_t dx = 0; dx < r; ++dx)
          for (std::size_t c = 0; c < d; ++c) {
            const std::size_t src = (i * r + dy) * w + (j * r + dx);
            CHECK(out.at(i * (w / r) + j, (dy * r + dx) * d + c) == static_cast<double>(src * 10 + c));
          }
}

TEST_CASE("pixel shuffle is a permutation undone by unshuffle") {
  Tensor hidden = random_hidden(36, 4, 1);
  Tensor out = pixel_shuffle_reindex(hidden, 6, 6, 3);
  CHECK(out.shape() == Shape{4, 36});
  std::vector<double> a(hidden.data().begin(), hidden.data().end()), b(out.data().begin(), out.data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
  Tensor back = pixel_unshuffle(out, 6, 6, 3);
  CHECK(std::equal(back.data().begin(), back.data().end(), hidden.data().begin()));
  CHECK_THROWS_AS(pixel_shuffle_reindex(random_hidden(25, 4, 2), 5, 5, 2), DivisibilityError);
  CHECK_THROWS_AS(pixel_shuffle_reindex(random_hidden(24, 4, 2), 5, 5, 1), ShapeError);
}

TEST_CASE("linear connector is an affine map") {
  Rng rng(3);
  Connector conn(config(ConnectorKind::linear), rng);
  Tensor hidden = random_hidden(7, 8, 4);
  VisualTokens tok = conn.project(hidden, 7, 1, 2);
  CHECK(tok.count() == 7);
  CHECK(tok.dim() == 12);
  CHECK(tok.origin == 2);
  const Tensor& w = conn.projection().weight();
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t o = 0; o < 12; ++o) {
      double expect = 0;
      for (std::size_t i = 0; i < 8; ++i) expect += hidden.at(t, i) * w.at(i, o);
      CHECK(tok.values.at(t, o) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("perceiver emits a fixed number of tokens for any input length") {
  Rng rng(5);
  Connector conn(config(ConnectorKind::perceiver), rng);
  for (std::size_t n : {1, 9, 40}) {
    std::vector<Tensor> attn;
    VisualTokens tok = conn.perceiver_resample(random_hidden(n, 8, n), &attn);
    CHECK(tok.count() == 5);
    CHECK(tok.dim() == 12);
    REQUIRE(attn.size() == 2);
    for (const auto& a : attn) {
      CHECK(a.shape() == Shape{5, n});
      for (std::size_t q = 0; q < 5; ++q) {
        double total = 0;
        for (std::size_t k = 0; k < n; ++k) total += a.at(q, k);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("perceiver ignores input order unless 2-D positions are on") {
  Tensor hidden = random_hidden(16, 8, 6);
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  Tensor shuffled = gather_rows(hidden, perm);

  Rng rng(7);
  Connector plain(config(ConnectorKind::perceiver), rng);
  Tensor a = plain.perceiver_resample(hidden).values, b = plain.perceiver_resample(shuffled).values;
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));

  ConnectorConfig cfg = config(ConnectorKind::perceiver);
  cfg.perceiver_pos2d = true;
  Rng rng2(7);
  Connector pos(cfg, rng2);
  Tensor c = pos.perceiver_resample(hidden, nullptr, 4, 4).values;
  Tensor d = pos.perceiver_resample(shuffled, nullptr, 4, 4).values;
  double diff = 0;
  for (std::size_t i = 0; i < c.numel(); ++i) diff = std::max(diff, std::abs(c.data()[i] - d.data()[i]));
  CHECK(diff > 1e-6);
  CHECK_THROWS_AS(pos.perceiver_resample(hidden, nullptr, 3, 4), ShapeError);
}

TEST_CASE("connector input validation") {
  Rng rng(8);
  Connector conn(config(ConnectorKind::pixel_shuffle), rng);
  CHECK_THROWS_AS(conn.project(random_hidden(16, 5, 9), 4, 4), ShapeError);
  CHECK_THROWS_AS(conn.project(Tensor(), 4, 4), EmptyInputError);
  CHECK_THROWS_AS(conn.linear_project(random_hidden(16, 8, 9)), ConfigError);
  CHECK(conn.project(random_hidden(16, 8, 9), 4, 4).count() == 4);
  CHECK_THROWS_AS(parse_connector_kind("mlp"), ConfigError);
  for (auto k : {ConnectorKind::linear, ConnectorKind::perceiver, ConnectorKind::pixel_shuffle})
    CHECK(parse_connector_kind(to_string(k)) == k);
}

TEST_CASE("connector gradients match finite differences") {
  for (auto kind : {ConnectorKind::linear, ConnectorKind::perceiver, ConnectorKind::pixel_shuffle}) {
    CAPTURE(to_string(kind));
    Rng rng(10);
    Connector conn(config(kind), rng);
    ParamList params;
    conn.collect("c", params);
    std::vector<Tensor> tensors;
    for (auto& p : params) {
      p.tensor.set_requires_grad(true);
      tensors.push_back(p.tensor);
    }
    Tensor hidden = random_hidden(16, 8, 11);
    Tensor weights = random_hidden(conn.config().tokens_per_tile(4, 4), 12, 12);
    auto loss = [&] { return sum(mul(conn.project(hidden, 4, 4).values, weights)); };
    CHECK(finite_diff_check_params(loss, tensors, 1e-5, 6, 13) < 1e-5);
  }
}
