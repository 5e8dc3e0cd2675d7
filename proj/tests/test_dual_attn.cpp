#include "isg/dual_attn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "isg/errors.hpp"
#include "isg/grad_check.hpp"
#include "isg/rng.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

using namespace isg;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng, double sigma = 0.5) {
  return Tensor::randn(std::move(shape), rng, sigma);
}

Tensor identity(int d) {
  Tensor w({d, d});
  for (int i = 0; i < d; ++i) w.data[static_cast<std::size_t>(i) * d + i] = 1.0;
  return w;
}

FusionParams random_fusion(int s, int d, Rng& rng) {
  return {leaf(randn({s * s, d}, rng)), leaf(randn({d, d}, rng)), leaf(randn({d, d}, rng)),
          leaf(randn({d, d}, rng)), leaf(randn({s * s, d}, rng)), leaf(randn({d, d}, rng)),
          leaf(randn({d, d}, rng))};
}

FusionParams zero_fusion(int s, int d) {
  return {leaf(Tensor({s * s, d})), leaf(Tensor({d, d})), leaf(Tensor({d, d})),
          leaf(Tensor({d, d})), leaf(Tensor({s * s, d})), leaf(Tensor({d, d})),
          leaf(Tensor({d, d}))};
}

double cube_at(const Tensor& t, int i, int j, int c) {
  const int s = t.extent(1), d = t.extent(2);
  return t.data[(static_cast<std::size_t>(i) * s + j) * d + c];
}

double mat_at(const Tensor& w, int r, int c) {
  return w.data[static_cast<std::size_t>(r) * w.extent(1) + c];
}

// Explicit-loop evaluation of the local update: Q = reshape(W_q f),
// A = sigmoid(Q . (R W_k)) with channel broadcast, output (A . (R W_v)) W_r.
Tensor loop_local(const Tensor& f, const Tensor& cube, const FusionParams& p) {
  const int s = cube.extent(0), d = cube.extent(2);
  const Tensor &wq = p.w_q->value, &wk = p.w_k->value, &wv = p.w_v->value, &wr = p.w_r->value;
  Tensor out({s, s, d});
  std::vector<double> gated(static_cast<std::size_t>(d));
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      double q = 0.0;
      for (int c = 0; c < d; ++c) q += mat_at(wq, i * s + j, c) * f.data[c];
      for (int cp = 0; cp < d; ++cp) {
        double k = 0.0, v = 0.0;
        for (int c = 0; c < d; ++c) {
          k += cube_at(cube, i, j, c) * mat_at(wk, c, cp);
          v += cube_at(cube, i, j, c) * mat_at(wv, c, cp);
        }
        gated[static_cast<std::size_t>(cp)] = v / (1.0 + std::exp(-q * k));
      }
      for (int cp = 0; cp < d; ++cp) {
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += gated[static_cast<std::size_t>(c)] * mat_at(wr, c, cp);
        out.data[(static_cast<std::size_t>(i) * s + j) * d + cp] = acc;
      }
    }
  return out;
}

// Explicit-loop evaluation of the global update: Z = softmax(reshape(W_z f)),
// output sum_spatial(Z . (R W_p)) W_f.
Tensor loop_global(const Tensor& f, const Tensor& cube, const FusionParams& p) {
  const int s = cube.extent(0), d = cube.extent(2);
  const Tensor &wz = p.w_z->value, &wp = p.w_p->value, &wf = p.w_f->value;
  std::vector<double> z(static_cast<std::size_t>(s) * s);
  double zmax = -1e300;
  for (int pos = 0; pos < s * s; ++pos) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) acc += mat_at(wz, pos, c) * f.data[c];
    z[static_cast<std::size_t>(pos)] = acc;
    zmax = std::max(zmax, acc);
  }
  double zsum = 0.0;
  for (auto& v : z) {
    v = std::exp(v - zmax);
    zsum += v;
  }
  for (auto& v : z) v /= zsum;

  std::vector<double> pooled(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int cp = 0; cp < d; ++cp) {
        double pv = 0.0;
        for (int c = 0; c < d; ++c) pv += cube_at(cube, i, j, c) * mat_at(wp, c, cp);
        pooled[static_cast<std::size_t>(cp)] += z[static_cast<std::size_t>(i) * s + j] * pv;
      }
  Tensor out({d});
  for (int cp = 0; cp < d; ++cp) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) acc += pooled[static_cast<std::size_t>(c)] * mat_at(wf, c, cp);
    out.data[static_cast<std::size_t>(cp)] = acc;
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  return worst;
}

MbconvParams zero_mbconv(int d, int ratio) {
  const int e = ratio * d;
  return {leaf(Tensor({1, 1, d, e})), leaf(Tensor({e})), leaf(Tensor({3, 3, e})),
          leaf(Tensor({e})), leaf(Tensor({1, 1, e, d})), leaf(Tensor({d}))};
}

VitConfig small_vit(int genes) {
  VitConfig vit;
  vit.layers = 1;
  vit.heads = 2;
  vit.mlp_ratio = 2;
  vit.genes = genes;
  vit.token_cap = 16;
  return vit;
}

// single-head variant for odd model dims
VitConfig lone_vit(int genes) {
  VitConfig vit = small_vit(genes);
  vit.heads = 1;
  return vit;
}

FeatureStore random_store(int d, int s, int count, Rng& rng) {
  FeatureStore fs;
  fs.d = d;
  fs.cube_side = s;
  for (int i = 0; i < count; ++i) {
    FeatureRecord rec;
    rec.patch_id = i;
    rec.grid_row = i / 3;
    rec.grid_col = i % 3;
    rec.global = randn({d}, rng);
    rec.cube = randn({s, s, d}, rng);
    fs.records.push_back(std::move(rec));
  }
  return fs;
}

void nudge_params(const ParamStore& store, uint64_t seed, double sigma) {
  Rng rng(seed);
  for (const auto& v : store.trainable())
    for (auto& x : v->value.data) x += sigma * rng.normal();
}

}  // namespace

TEST_CASE("fusion updates match explicit-loop oracles") {
  Rng rng(41);
  int instances = 0;
  auto check_instance = [&](int s, int d) {
    const auto p = random_fusion(s, d, rng);
    const Tensor f = randn({d}, rng);
    const Tensor cube = randn({s, s, d}, rng);
    Graph g;
    const Var local = local_feature_update(g, leaf(f), leaf(cube), p);
    const Var global = global_feature_update(g, leaf(f), leaf(cube), p);
    CHECK(local->value.shape == cube.shape);
    REQUIRE(global->value.numel() == static_cast<std::size_t>(d));
    CHECK(max_abs_diff(local->value, loop_local(f, cube, p)) < 1e-10);
    CHECK(max_abs_diff(global->value, loop_global(f, cube, p)) < 1e-10);
    ++instances;
  };
  // one full sweep of the shape grid, then fresh random redraws
  for (int s = 2; s <= 4; ++s)
    for (int d = 3; d <= 8; ++d) check_instance(s, d);
  for (int extra = 0; extra < 12; ++extra)
    check_instance(static_cast<int>(rng.uniform_int(2, 4)),
                   static_cast<int>(rng.uniform_int(3, 8)));
  CHECK(instances >= 20);
}

TEST_CASE("zero-weight fusion laws hold") {
  Rng rng(43);
  const int s = 3, d = 4;
  const Tensor f = randn({d}, rng);
  const Tensor cube = randn({s, s, d}, rng);

  // all weights zero: V = 0, so the gated output is the zero cube
  {
    Graph g;
    const Var out = local_feature_update(g, leaf(f), leaf(cube), zero_fusion(s, d));
    for (double v : out->value.data) CHECK(v == 0.0);
  }

  // zero query against identity value/remix exposes the half-open gate
  {
    auto p = zero_fusion(s, d);
    p.w_v = leaf(identity(d));
    p.w_r = leaf(identity(d));
    Graph g;
    const Var out = local_feature_update(g, leaf(f), leaf(cube), p);
    for (std::size_t i = 0; i < cube.data.size(); ++i)
      CHECK(out->value.data[i] == 0.5 * cube.data[i]);
  }

  // zero score map: Z is uniform, and a spatially constant cube pools to
  // its shared vector times W_f
  {
    Tensor flat({s, s, d});
    const Tensor v = randn({d}, rng);
    for (int pos = 0; pos < s * s; ++pos)
      std::copy(v.data.begin(), v.data.end(),
                flat.data.begin() + static_cast<std::ptrdiff_t>(pos) * d);
    auto p = zero_fusion(s, d);
    p.w_p = leaf(identity(d));
    p.w_f = leaf(randn({d, d}, rng));
    Graph g;
    const Var out = global_feature_update(g, leaf(f), leaf(flat), p);
    for (int cp = 0; cp < d; ++cp) {
      double want = 0.0;
      for (int c = 0; c < d; ++c) want += v.data[c] * mat_at(p.w_f->value, c, cp);
      CHECK(out->value.data[cp] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("a concentrated score map selects one position") {
  Rng rng(47);
  const int s = 3, d = 3;
  const Tensor cube = randn({s, s, d}, rng);
  Tensor f({d});
  f.data[0] = 1.0;

  const int pos0 = 4;
  auto p = zero_fusion(s, d);
  Tensor wz({s * s, d});
  wz.data[static_cast<std::size_t>(pos0) * d] = 1000.0;
  p.w_z = leaf(wz);
  p.w_p = leaf(identity(d));
  p.w_f = leaf(identity(d));

  Graph g;
  const Var out = global_feature_update(g, leaf(f), leaf(cube), p);
  for (int c = 0; c < d; ++c)
    CHECK(out->value.data[c] ==
          doctest::Approx(cube_at(cube, pos0 / s, pos0 % s, c)).epsilon(1e-6));
}

TEST_CASE("mbconv with zero weights is the identity") {
  Rng rng(53);
  const Tensor cube = randn({4, 4, 3}, rng);
  Graph g;
  const Var out = mbconv_block(g, leaf(cube), zero_mbconv(3, 4));
  CHECK(out->value.shape == cube.shape);
  CHECK(out->value.data == cube.data);
}

TEST_CASE("mbconv matches a naive convolution oracle") {
  Rng rng(59);
  const int s = 3, d = 3, e = 6;
  const Tensor cube = randn({s, s, d}, rng);
  MbconvParams p{leaf(randn({1, 1, d, e}, rng)), leaf(randn({e}, rng)),
                 leaf(randn({3, 3, e}, rng)),    leaf(randn({e}, rng)),
                 leaf(randn({1, 1, e, d}, rng)), leaf(randn({d}, rng))};

  // expand: per-position matmul with bias, then relu
  std::vector<double> h(static_cast<std::size_t>(s) * s * e);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int o = 0; o < e; ++o) {
        double acc = p.expand_b->value.data[static_cast<std::size_t>(o)];
        for (int c = 0; c < d; ++c)
          acc += cube_at(cube, i, j, c) *
                 p.expand_w->value.data[static_cast<std::size_t>(c) * e + o];
        h[(static_cast<std::size_t>(i) * s + j) * e + o] = std::max(acc, 0.0);
      }
  // depthwise 3x3 with padding 1, then relu
  std::vector<double> h2(h.size());
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int o = 0; o < e; ++o) {
        double acc = p.dw_b->value.data[static_cast<std::size_t>(o)];
        for (int di = 0; di < 3; ++di)
          for (int dj = 0; dj < 3; ++dj) {
            const int ii = i + di - 1, jj = j + dj - 1;
            if (ii < 0 || ii >= s || jj < 0 || jj >= s) continue;
            acc += h[(static_cast<std::size_t>(ii) * s + jj) * e + o] *
                   p.dw_w->value.data[(static_cast<std::size_t>(di) * 3 + dj) * e + o];
          }
        h2[(static_cast<std::size_t>(i) * s + j) * e + o] = std::max(acc, 0.0);
      }
  // project and residual add
  Tensor want({s, s, d});
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int c = 0; c < d; ++c) {
        double acc = p.project_b->value.data[static_cast<std::size_t>(c)];
        for (int o = 0; o < e; ++o)
          acc += h2[(static_cast<std::size_t>(i) * s + j) * e + o] *
                 p.project_w->value.data[static_cast<std::size_t>(o) * d + c];
        want.data[(static_cast<std::size_t>(i) * s + j) * d + c] = acc + cube_at(cube, i, j, c);
      }

  Graph g;
  const Var out = mbconv_block(g, leaf(cube), p);
  CHECK(max_abs_diff(out->value, want) < 1e-10);
}

TEST_CASE("fusion count follows the floor law") {
  CHECK(fusion_count({10, 2, 4}) == 5);
  CHECK(fusion_count({10, 3, 4}) == 3);
  CHECK(fusion_count({7, 7, 4}) == 1);
  CHECK(fusion_count({5, 1, 4}) == 5);
  CHECK(fusion_count({1, 1, 4}) == 1);

  const auto params = make_predictor(4, 2, {10, 2, 4}, small_vit(1), 7);
  CHECK(params.store.has("fuse4.w_q"));
  CHECK_FALSE(params.store.has("fuse5.w_q"));
  CHECK_NOTHROW(fusion_at(params, 4));
  CHECK_THROWS_WITH_AS(fusion_at(params, 5), doctest::Contains("out of range"), Error);
  CHECK_NOTHROW(mbconv_at(params, 9));
  CHECK_THROWS_WITH_AS(mbconv_at(params, 10), doctest::Contains("out of range"), Error);
}

TEST_CASE("fused_stack preserves shapes for every tested layout") {
  Rng rng(61);
  for (const auto& [blocks, every] :
       std::vector<std::pair<int, int>>{{10, 2}, {4, 4}, {3, 1}, {5, 3}}) {
    const auto params = make_predictor(4, 2, {blocks, every, 2}, small_vit(1),
                                       static_cast<uint64_t>(blocks * 100 + every));
    Graph g;
    const auto [f, cube] =
        fused_stack(g, leaf(randn({4}, rng)), leaf(randn({2, 2, 4}, rng)), params);
    CHECK(f->value.shape == std::vector<int>{4});
    CHECK(cube->value.shape == std::vector<int>{2, 2, 4});
    for (double v : f->value.data) CHECK(std::isfinite(v));
    for (double v : cube->value.data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("fused_stack with zero weights collapses to zero") {
  // mbconv branches vanish (identity) and the first fusion zeroes both
  // streams; everything after must stay exactly zero
  auto params = make_predictor(3, 2, {2, 1, 2}, lone_vit(1), 11);
  for (const auto& v : params.store.trainable())
    std::fill(v->value.data.begin(), v->value.data.end(), 0.0);
  Rng rng(67);
  Graph g;
  const auto [f, cube] =
      fused_stack(g, leaf(randn({3}, rng)), leaf(randn({2, 2, 3}, rng)), params);
  for (double v : f->value.data) CHECK(v == 0.0);
  for (double v : cube->value.data) CHECK(v == 0.0);
}

TEST_CASE("fusion applies local and global updates in parallel") {
  // one identity mbconv then one fusion: the returned global vector must be
  // computed from the pre-fusion cube, not from the freshly gated one
  auto params = make_predictor(3, 2, {1, 1, 2}, lone_vit(1), 13);
  for (const char* name : {"mb0.expand.w", "mb0.expand.b", "mb0.dw.w", "mb0.dw.b",
                           "mb0.project.w", "mb0.project.b"}) {
    const auto v = params.store.get(name);
    std::fill(v->value.data.begin(), v->value.data.end(), 0.0);
  }
  Rng rng(71);
  const Tensor f0 = randn({3}, rng);
  const Tensor cube0 = randn({2, 2, 3}, rng);
  Graph g;
  const auto [f, cube] = fused_stack(g, leaf(f0), leaf(cube0), params);

  const auto fp = fusion_at(params, 0);
  const Tensor local_out = loop_local(f0, cube0, fp);
  CHECK(max_abs_diff(cube->value, local_out) < 1e-10);
  CHECK(max_abs_diff(f->value, loop_global(f0, cube0, fp)) < 1e-10);

  // the sequential reading would feed the gated cube into the global update
  const Tensor sequential = loop_global(f0, local_out, fp);
  CHECK(max_abs_diff(f->value, sequential) > 1e-6);
}

TEST_CASE("positional encoding splits channels between row and column") {
  const double row = 0.3, col = 0.8;
  const Tensor pe = positional_encoding(row, col, 8);
  REQUIRE(pe.shape == std::vector<int>{8});
  CHECK(pe.data[0] == doctest::Approx(std::sin(row)).epsilon(1e-12));
  CHECK(pe.data[1] == doctest::Approx(std::cos(row)).epsilon(1e-12));
  CHECK(pe.data[2] == doctest::Approx(std::sin(row / 100.0)).epsilon(1e-12));
  CHECK(pe.data[3] == doctest::Approx(std::cos(row / 100.0)).epsilon(1e-12));
  CHECK(pe.data[4] == doctest::Approx(std::sin(col)).epsilon(1e-12));
  CHECK(pe.data[5] == doctest::Approx(std::cos(col)).epsilon(1e-12));
  CHECK(pe.data[6] == doctest::Approx(std::sin(col / 100.0)).epsilon(1e-12));
  CHECK(pe.data[7] == doctest::Approx(std::cos(col / 100.0)).epsilon(1e-12));

  // row moves only the first half, column only the second
  const Tensor a = positional_encoding(0.2, 0.9, 6);
  const Tensor b = positional_encoding(0.5, 0.9, 6);
  const Tensor c = positional_encoding(0.2, 0.4, 6);
  for (int i = 3; i < 6; ++i) CHECK(a.data[static_cast<std::size_t>(i)] ==
                                    b.data[static_cast<std::size_t>(i)]);
  for (int i = 0; i < 3; ++i) CHECK(a.data[static_cast<std::size_t>(i)] ==
                                    c.data[static_cast<std::size_t>(i)]);
  CHECK(a.data != b.data);
  CHECK(a.data != c.data);

  const Tensor tiny = positional_encoding(0.1, 0.7, 1);
  CHECK(tiny.data[0] == doctest::Approx(std::sin(0.7)).epsilon(1e-12));
  for (double v : pe.data) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("vit_predict returns a finite gene vector and honors the silent head") {
  auto params = make_predictor(4, 2, {1, 1, 2}, small_vit(3), 17);
  Rng rng(73);
  std::vector<TokenInput> tokens(1);
  tokens[0].features = randn({4}, rng);
  tokens[0].row = 0.2;
  tokens[0].col = 0.7;

  const auto zero_out = vit_predict(tokens, params);
  REQUIRE(zero_out.size() == 3);
  for (double v : zero_out) CHECK(v == 0.0);

  nudge_params(params.store, 79, 0.05);
  const auto out = vit_predict(tokens, params);
  REQUIRE(out.size() == 3);
  for (double v : out) CHECK(std::isfinite(v));
  CHECK(std::any_of(out.begin(), out.end(), [](double v) { return v != 0.0; }));
}

TEST_CASE("vit output is permutation invariant without positional encodings") {
  VitConfig vit = small_vit(2);
  vit.heads = 3;
  vit.positional = false;
  auto params = make_predictor(6, 2, {1, 1, 2}, vit, 19);
  nudge_params(params.store, 83, 0.05);

  Rng rng(89);
  std::vector<TokenInput> tokens(5);
  for (auto& t : tokens) {
    t.features = randn({6}, rng);
    t.row = rng.uniform();
    t.col = rng.uniform();
  }
  std::vector<TokenInput> shuffled{tokens[3], tokens[0], tokens[4], tokens[2], tokens[1]};

  const auto base = vit_predict(tokens, params);
  const auto perm = vit_predict(shuffled, params);
  REQUIRE(base.size() == perm.size());
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(base[i] == doctest::Approx(perm[i]).epsilon(1e-9));
}

TEST_CASE("positional encodings move with their tokens") {
  VitConfig vit = small_vit(2);
  auto params = make_predictor(4, 2, {1, 1, 2}, vit, 23);
  nudge_params(params.store, 97, 0.05);

  Rng rng(101);
  std::vector<TokenInput> tokens(4);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    tokens[i].features = randn({4}, rng);
    tokens[i].row = 0.2 * static_cast<double>(i);
    tokens[i].col = 0.9 - 0.2 * static_cast<double>(i);
  }
  std::vector<TokenInput> moved{tokens[2], tokens[3], tokens[0], tokens[1]};

  // coordinates travel with the token: still invariant
  const auto base = vit_predict(tokens, params);
  const auto perm = vit_predict(moved, params);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(base[i] == doctest::Approx(perm[i]).epsilon(1e-9));

  // same features under swapped coordinates: the encoding must matter
  auto relabeled = tokens;
  std::swap(relabeled[0].row, relabeled[3].row);
  std::swap(relabeled[0].col, relabeled[3].col);
  const auto other = vit_predict(relabeled, params);
  double diff = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) diff = std::max(diff, std::abs(base[i] - other[i]));
  CHECK(diff > 1e-8);
}

TEST_CASE("vit rejects malformed token lists") {
  auto params = make_predictor(4, 2, {1, 1, 2}, small_vit(1), 29);
  CHECK_THROWS_WITH_AS(vit_predict({}, params), doctest::Contains("at least one token"), Error);

  VitConfig capped = small_vit(1);
  capped.token_cap = 2;
  auto tight = make_predictor(4, 2, {1, 1, 2}, capped, 31);
  Rng rng(103);
  std::vector<TokenInput> three(3);
  for (auto& t : three) t.features = randn({4}, rng);
  CHECK_THROWS_WITH_AS(vit_predict(three, tight), doctest::Contains("exceeds cap"), Error);

  std::vector<TokenInput> wide(1);
  wide[0].features = randn({5}, rng);
  CHECK_THROWS_WITH_AS(vit_predict(wide, params), doctest::Contains("token length"), Error);

  Graph g;
  const std::vector<Var> tokens{leaf(randn({4}, rng)), leaf(randn({4}, rng))};
  CHECK_THROWS_WITH_AS(vit_forward(g, tokens, {{0.0, 0.0}}, params),
                       doctest::Contains("one coordinate pair"), Error);
}

TEST_CASE("make_predictor validates its configuration") {
  const VitConfig vit = small_vit(1);
  CHECK_THROWS_AS(make_predictor(0, 2, {2, 1, 2}, vit, 1), Error);
  CHECK_THROWS_AS(make_predictor(4, 0, {2, 1, 2}, vit, 1), Error);
  CHECK_THROWS_AS(make_predictor(4, 2, {0, 1, 2}, vit, 1), Error);
  CHECK_THROWS_AS(make_predictor(4, 2, {2, 0, 2}, vit, 1), Error);
  CHECK_THROWS_AS(make_predictor(4, 2, {2, 3, 2}, vit, 1), Error);
  CHECK_THROWS_AS(make_predictor(4, 2, {2, 1, 0}, vit, 1), Error);

  VitConfig odd = vit;
  odd.heads = 3;
  CHECK_THROWS_WITH_AS(make_predictor(4, 2, {2, 1, 2}, odd, 1), doctest::Contains("divisible"),
                       Error);
  VitConfig none = vit;
  none.genes = 0;
  CHECK_THROWS_AS(make_predictor(4, 2, {2, 1, 2}, none, 1), Error);
  VitConfig uncapped = vit;
  uncapped.token_cap = 0;
  CHECK_THROWS_AS(make_predictor(4, 2, {2, 1, 2}, uncapped, 1), Error);
}

TEST_CASE("fusion updates reject malformed shapes") {
  Rng rng(107);
  const auto p = random_fusion(2, 3, rng);
  Graph g;
  CHECK_THROWS_WITH_AS(
      local_feature_update(g, leaf(randn({3}, rng)), leaf(randn({2, 3, 3}, rng)), p),
      doctest::Contains("s x s x d"), Error);
  CHECK_THROWS_WITH_AS(
      local_feature_update(g, leaf(randn({4}, rng)), leaf(randn({2, 2, 3}, rng)), p),
      doctest::Contains("global vector length"), Error);
  const auto wrong = random_fusion(3, 3, rng);
  CHECK_THROWS_WITH_AS(
      global_feature_update(g, leaf(randn({3}, rng)), leaf(randn({2, 2, 3}, rng)), wrong),
      doctest::Contains("w_q must be"), Error);
}

TEST_CASE("predict_genes subsamples deterministically under the token cap") {
  Rng rng(109);
  VitConfig vit = small_vit(2);
  vit.token_cap = 4;
  auto params = make_predictor(4, 2, {2, 1, 2}, vit, 37);
  nudge_params(params.store, 113, 0.05);

  const auto big = random_store(4, 2, 10, rng);
  const auto a = predict_genes(big, params, 7);
  const auto b = predict_genes(big, params, 7);
  const auto c = predict_genes(big, params, 8);
  CHECK(a == b);
  CHECK(a != c);

  const auto small = random_store(4, 2, 3, rng);
  CHECK(predict_genes(small, params, 7) == predict_genes(small, params, 8));
}

TEST_CASE("predict_slide validates stores and indices") {
  auto params = make_predictor(4, 2, {2, 1, 2}, small_vit(2), 41);
  Graph g;
  FeatureStore empty;
  empty.d = 4;
  empty.cube_side = 2;
  CHECK_THROWS_WITH_AS(predict_slide(g, empty, {}, params), doctest::Contains("no records"),
                       Error);
  Rng rng(127);
  const auto fs = random_store(4, 2, 3, rng);
  CHECK_THROWS_WITH_AS(predict_slide(g, fs, {0, 5}, params),
                       doctest::Contains("token index"), Error);
}

TEST_CASE("end-to-end composite passes the gradient check") {
  StackConfig stack{2, 1, 2};
  VitConfig vit = small_vit(2);
  auto params = make_predictor(4, 2, stack, vit, 131);
  // move every weight off its exact-zero init so no relu kink sits at the
  // linearization point, and far enough that no gradient drowns in
  // central-difference noise
  nudge_params(params.store, 137, 0.05);

  Rng rng(139);
  const auto fs = random_store(4, 2, 2, rng);
  const Tensor target = randn({2}, rng);

  auto make = [&](Graph& g) {
    return l2_loss(g, predict_slide(g, fs, {0, 1}, params), leaf(target));
  };
  const double worst = grad_check(make, params.store.trainable(), 1e-4);
  CHECK(worst < 1e-4);
}

namespace {

LabeledSlide make_labeled(const std::string& id, const FeatureStore& fs, GeneVector label) {
  LabeledSlide slide;
  slide.slide_id = id;
  slide.features = fs;
  slide.label = std::move(label);
  return slide;
}

}  // namespace

TEST_CASE("zero learning rate freezes the loss trace") {
  Rng rng(149);
  std::vector<LabeledSlide> train{
      make_labeled("a", random_store(3, 2, 2, rng), {0.4}),
      make_labeled("b", random_store(3, 2, 3, rng), {1.1}),
  };
  PredictorTrainConfig cfg;
  cfg.epochs = 4;
  cfg.lr = 0.0;
  const auto res = train_predictor(train, {}, {2, 1, 2}, lone_vit(1), cfg);
  REQUIRE(res.train_loss.size() == 4);
  for (double v : res.train_loss)
    CHECK(v == doctest::Approx(res.train_loss[0]).epsilon(1e-12));
  CHECK(res.val_pcc.empty());

  // one slide leaves nothing for the shuffle to reorder: bitwise constant
  const std::vector<LabeledSlide> solo{train[0]};
  const auto frozen = train_predictor(solo, {}, {2, 1, 2}, lone_vit(1), cfg);
  for (double v : frozen.train_loss) CHECK(v == frozen.train_loss[0]);
}

TEST_CASE("zero labels meet the silent head at loss zero") {
  Rng rng(151);
  std::vector<LabeledSlide> train{
      make_labeled("a", random_store(3, 2, 2, rng), {0.0, 0.0}),
      make_labeled("b", random_store(3, 2, 2, rng), {0.0, 0.0}),
  };
  PredictorTrainConfig cfg;
  cfg.epochs = 3;
  const auto res = train_predictor(train, {}, {2, 1, 2}, lone_vit(2), cfg);
  for (double v : res.train_loss) CHECK(v == 0.0);
}

TEST_CASE("train_predictor is deterministic") {
  Rng rng(157);
  std::vector<LabeledSlide> train, val;
  for (int i = 0; i < 3; ++i)
    train.push_back(make_labeled("t" + std::to_string(i), random_store(4, 2, 3, rng),
                                 {0.2 * i, 1.0 - 0.1 * i}));
  for (int i = 0; i < 2; ++i)
    val.push_back(make_labeled("v" + std::to_string(i), random_store(4, 2, 2, rng),
                               {0.3 * i, 0.5 + 0.1 * i}));
  PredictorTrainConfig cfg;
  cfg.epochs = 3;
  const auto a = train_predictor(train, val, {2, 1, 2}, small_vit(2), cfg);
  const auto b = train_predictor(train, val, {2, 1, 2}, small_vit(2), cfg);
  CHECK(a.train_loss == b.train_loss);
  CHECK(a.val_pcc == b.val_pcc);
  REQUIRE(a.params.store.items.size() == b.params.store.items.size());
  for (std::size_t i = 0; i < a.params.store.items.size(); ++i) {
    CHECK(a.params.store.items[i].first == b.params.store.items[i].first);
    CHECK(a.params.store.items[i].second->value.data == b.params.store.items[i].second->value.data);
  }
}

TEST_CASE("train_predictor validates its inputs") {
  Rng rng(163);
  const auto fs = random_store(3, 2, 2, rng);
  const std::vector<LabeledSlide> train{make_labeled("a", fs, {0.5}), make_labeled("b", fs, {0.7})};
  const StackConfig stack{2, 1, 2};
  const VitConfig vit = small_vit(1);
  PredictorTrainConfig cfg;
  cfg.epochs = 1;

  CHECK_THROWS_WITH_AS(train_predictor({}, {}, stack, vit, cfg),
                       doctest::Contains("at least one slide"), Error);

  PredictorTrainConfig bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(train_predictor(train, {}, stack, vit, bad), Error);
  bad = cfg;
  bad.lr = -1.0;
  CHECK_THROWS_AS(train_predictor(train, {}, stack, vit, bad), Error);
  bad = cfg;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(train_predictor(train, {}, stack, vit, bad), Error);

  CHECK_THROWS_WITH_AS(train_predictor(train, {}, stack, small_vit(2), cfg),
                       doctest::Contains("does not match label"), Error);

  auto empty_records = train;
  empty_records[1].features.records.clear();
  CHECK_THROWS_WITH_AS(train_predictor(empty_records, {}, stack, vit, cfg),
                       doctest::Contains("no selected patches"), Error);

  auto ragged = train;
  ragged[1].label = {0.1, 0.2};
  CHECK_THROWS_WITH_AS(train_predictor(ragged, {}, stack, vit, cfg),
                       doctest::Contains("label length"), Error);

  auto poisoned = train;
  poisoned[1].label = {std::nan("")};
  CHECK_THROWS_WITH_AS(train_predictor(poisoned, {}, stack, vit, cfg),
                       doctest::Contains("not finite"), Error);

  auto mixed = train;
  mixed[1].features = random_store(4, 2, 2, rng);
  CHECK_THROWS_WITH_AS(train_predictor(mixed, {}, stack, vit, cfg),
                       doctest::Contains("feature dims"), Error);
}

TEST_CASE("train_predictor learns a monotone synthetic signal") {
  // every record's channels hover around a per-slide level u and the labels
  // are monotone in u, so pooling plus a linear map suffices
  Rng rng(167);
  auto make_slide = [&](const std::string& id, double u) {
    FeatureStore fs;
    fs.d = 8;
    fs.cube_side = 2;
    for (int t = 0; t < 6; ++t) {
      FeatureRecord rec;
      rec.patch_id = t;
      rec.grid_row = t / 3;
      rec.grid_col = t % 3;
      rec.global = Tensor({8});
      for (auto& v : rec.global.data) v = u + 0.05 * rng.normal();
      rec.cube = Tensor({2, 2, 8});
      for (auto& v : rec.cube.data) v = u + 0.05 * rng.normal();
      fs.records.push_back(std::move(rec));
    }
    return make_labeled(id, fs, {std::log1p(5.0 * u), 2.0 * u});
  };

  std::vector<LabeledSlide> train, val;
  for (int i = 0; i < 16; ++i)
    train.push_back(make_slide("t" + std::to_string(i), 0.1 + 0.8 * rng.uniform()));
  for (int i = 0; i < 5; ++i)
    val.push_back(make_slide("v" + std::to_string(i), 0.1 + 0.8 * rng.uniform()));

  PredictorTrainConfig cfg;
  cfg.epochs = 30;
  const auto res = train_predictor(train, val, {4, 2, 2}, small_vit(2), cfg);
  REQUIRE(res.val_pcc.size() == 30);
  CHECK(res.val_pcc.back() >= 0.8);
}
