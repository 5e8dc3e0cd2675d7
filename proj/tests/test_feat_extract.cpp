#include "isg/feat_extract.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "isg/rng.hpp"
#include "isg/synth_gen.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

using namespace isg;

namespace {

std::vector<std::vector<uint8_t>> family_mix(const char* fams, int count, int side,
                                             uint64_t seed0) {
  std::vector<std::vector<uint8_t>> out;
  const std::string f(fams);
  for (int i = 0; i < count; ++i) {
    const char c = f[static_cast<std::size_t>(i) % f.size()];
    const PatchKind kind = c == 'g'   ? PatchKind::Gradient
                           : c == 'c' ? PatchKind::Checker
                           : c == 'n' ? PatchKind::Noise
                                      : PatchKind::Constant;
    out.push_back(generate_patch(kind, side, seed0 + static_cast<uint64_t>(i)));
  }
  return out;
}

double dataset_mean_l1(const std::vector<std::vector<uint8_t>>& patches, int side,
                       const ExtractorParams& params, const PerceptualNet& phi) {
  const auto disc = make_discriminator(side, 1);
  double total = 0.0;
  for (const auto& buf : patches)
    total += reconstruction_losses(normalize_patch(buf.data(), side), params, phi, disc).l1;
  return total / static_cast<double>(patches.size());
}

bool stores_equal(const ParamStore& a, const ParamStore& b) {
  if (a.items.size() != b.items.size()) return false;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    if (a.items[i].first != b.items[i].first) return false;
    const auto& ta = a.items[i].second->value;
    const auto& tb = b.items[i].second->value;
    if (ta.shape != tb.shape || ta.data != tb.data) return false;
  }
  return true;
}

double spectral_norm(const Eigen::MatrixXd& m) {
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

// Upper bound on the spectral norm of a strided conv: sum over kernel
// offsets of the spectral norm of each cin x cout slice.
double conv_bound(const Tensor& w) {
  const int kh = w.extent(0), kw = w.extent(1), cin = w.extent(2), cout = w.extent(3);
  double total = 0.0;
  for (int ky = 0; ky < kh; ++ky)
    for (int kx = 0; kx < kw; ++kx) {
      Eigen::MatrixXd slice(cin, cout);
      for (int ci = 0; ci < cin; ++ci)
        for (int co = 0; co < cout; ++co)
          slice(ci, co) = w.data[static_cast<std::size_t>(((ky * kw + kx) * cin + ci)) * cout + co];
      total += spectral_norm(slice);
    }
  return total;
}

double vec_dist(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return std::sqrt(s);
}

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "isg_feat_test";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("extractor construction validates and is seed-deterministic") {
  CHECK_THROWS_AS(make_extractor(12, 32, 1), Error);
  CHECK_THROWS_AS(make_extractor(0, 32, 1), Error);
  CHECK_THROWS_AS(make_extractor(16, 0, 1), Error);
  const auto a = make_extractor(16, 8, 5);
  const auto b = make_extractor(16, 8, 5);
  const auto c = make_extractor(16, 8, 6);
  CHECK(stores_equal(a.store, b.store));
  CHECK_FALSE(stores_equal(a.store, c.store));
}

TEST_CASE("encode emits a deterministic d-vector") {
  const auto params = make_extractor(16, 8, 42);
  const auto buf = generate_patch(PatchKind::Gradient, 16, 7);
  const Tensor x = normalize_patch(buf.data(), 16);
  const Tensor f1 = encode(x, params);
  const Tensor f2 = encode(x, params);
  REQUIRE(f1.shape == std::vector<int>{8});
  CHECK(f1.data == f2.data);
  for (double v : f1.data) CHECK(std::isfinite(v));
}

TEST_CASE("zeroing the final linear layer zeroes every feature") {
  auto params = make_extractor(16, 8, 42);
  params.store.get("enc.lin.w")->value.fill(0.0);
  params.store.get("enc.lin.b")->value.fill(0.0);
  for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const auto buf = generate_patch(PatchKind::Noise, 16, seed);
    const Tensor f = encode(normalize_patch(buf.data(), 16), params);
    for (double v : f.data) CHECK(v == 0.0);
  }
}

TEST_CASE("encode rejects mismatched patch sides") {
  const auto params = make_extractor(16, 8, 42);
  GlobalPatch patch;
  patch.side = 24;
  patch.pixels.assign(24u * 24u * 3u, 0);
  CHECK_THROWS_AS(encode(patch, params), Error);
  patch.side = 16;
  patch.pixels.assign(7, 0);
  CHECK_THROWS_AS(encode(patch, params), Error);
}

TEST_CASE("one-pixel perturbations respect the spectral bound") {
  const auto params = make_extractor(16, 8, 11);
  double bound = conv_bound(params.store.get("enc.conv1.w")->value) *
                 conv_bound(params.store.get("enc.conv2.w")->value) *
                 conv_bound(params.store.get("enc.conv3.w")->value);
  const auto& lw = params.store.get("enc.lin.w")->value;
  Eigen::MatrixXd lin(lw.extent(0), lw.extent(1));
  for (int r = 0; r < lw.extent(0); ++r)
    for (int c = 0; c < lw.extent(1); ++c)
      lin(r, c) = lw.data[static_cast<std::size_t>(r) * lw.extent(1) + c];
  bound *= spectral_norm(lin);

  const auto buf = generate_patch(PatchKind::Checker, 16, 3);
  const Tensor x = normalize_patch(buf.data(), 16);
  const Tensor f = encode(x, params);
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x2 = x;
    const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(0, 16 * 16 * 3 - 1));
    const double delta = x2.data[idx] > 0.5 ? -0.25 : 0.25;
    x2.data[idx] += delta;
    const Tensor f2 = encode(x2, params);
    CHECK(vec_dist(f, f2) <= bound * std::abs(delta) * (1.0 + 1e-9));
  }
}

TEST_CASE("local cubes mirror the fine patch layout") {
  const auto params = make_extractor(16, 32, 8);

  GlobalPatch parent;
  parent.side = 64;
  parent.pixels = generate_patch(PatchKind::Gradient, 64, 5);
  const auto grid = tile_fine(parent, {64, 16});
  const Tensor cube = build_local_cube(grid, params);
  CHECK(cube.shape == std::vector<int>{4, 4, 32});
  // each spatial vector equals the independent encoding of its fine patch
  for (int cell = 0; cell < 16; ++cell) {
    const Tensor f = encode(normalize_patch(grid.patches[static_cast<std::size_t>(cell)].data(), 16), params);
    for (int j = 0; j < 32; ++j)
      CHECK(cube.data[static_cast<std::size_t>(cell) * 32 + j] == f.data[static_cast<std::size_t>(j)]);
  }

  GlobalPatch flat;
  flat.side = 64;
  flat.pixels = generate_patch(PatchKind::Constant, 64, 5);
  const Tensor flat_cube = build_local_cube(tile_fine(flat, {64, 16}), params);
  for (int cell = 1; cell < 16; ++cell)
    for (int j = 0; j < 32; ++j)
      CHECK(flat_cube.data[static_cast<std::size_t>(cell) * 32 + j] == flat_cube.data[static_cast<std::size_t>(j)]);

  // swapping two fine patches swaps exactly the two cube vectors
  auto swapped = grid;
  std::swap(swapped.patches[2], swapped.patches[9]);
  const Tensor cube2 = build_local_cube(swapped, params);
  for (int cell = 0; cell < 16; ++cell) {
    const int src = cell == 2 ? 9 : cell == 9 ? 2 : cell;
    for (int j = 0; j < 32; ++j)
      CHECK(cube2.data[static_cast<std::size_t>(cell) * 32 + j] ==
            cube.data[static_cast<std::size_t>(src) * 32 + j]);
  }
}

TEST_CASE("local cube construction rejects malformed grids") {
  const auto params = make_extractor(16, 8, 8);
  LocalPatchGrid grid;
  grid.grid = 2;
  grid.side = 8;  // does not match the extractor side
  grid.patches.assign(4, std::vector<uint8_t>(8u * 8u * 3u, 0));
  CHECK_THROWS_AS(build_local_cube(grid, params), Error);
  grid.side = 16;
  grid.patches.assign(3, std::vector<uint8_t>(16u * 16u * 3u, 0));
  CHECK_THROWS_AS(build_local_cube(grid, params), Error);
}

TEST_CASE("loss terms match their closed forms") {
  const auto phi = make_perceptual(77);
  auto disc = make_discriminator(16, 78);
  Rng rng(5);
  const Tensor x = Tensor::randn({16, 16, 3}, rng, 0.3);
  Tensor y = Tensor::randn({16, 16, 3}, rng, 0.3);

  {
    // identity reconstruction zeroes both distances
    Graph g;
    const Var xv = leaf(x, false);
    const auto terms = recon_terms(g, xv, xv, phi, &disc);
    CHECK(terms.l1->value.data[0] == 0.0);
    CHECK(terms.lpips->value.data[0] == 0.0);
  }
  {
    // a silent discriminator costs 2 ln 2
    auto mute = make_discriminator(16, 1);
    for (auto& item : mute.store.items) item.second->value.fill(0.0);
    Graph g;
    const Var xv = leaf(x, false);
    const Var yv = leaf(y, false);
    const auto terms = recon_terms(g, xv, yv, phi, &mute);
    CHECK(terms.disc_adv->value.data[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(terms.gen_adv->value.data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  {
    // l1 equals the elementwise oracle, adversarial terms match softplus
    Graph g;
    const Var xv = leaf(x, false);
    const Var yv = leaf(y, false);
    const auto terms = recon_terms(g, xv, yv, phi, &disc);
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += std::abs(y.data[i] - x.data[i]);
    CHECK(terms.l1->value.data[0] == doctest::Approx(acc / x.numel()).epsilon(1e-12));

    // the generator pays softplus(-logit) for a fake the critic rejects
    Graph g2;
    const double logit_fake = discriminator_forward(g2, yv, disc)->value.data[0];
    const double m = -logit_fake;
    const double sp = m > 0.0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
    CHECK(terms.gen_adv->value.data[0] == doctest::Approx(sp).epsilon(1e-12));
  }
  {
    Graph g;
    const Var xv = leaf(x, false);
    const Var bad = leaf(Tensor({8, 8, 3}), false);
    CHECK_THROWS_AS(recon_terms(g, xv, bad, phi, nullptr), Error);
  }
}

TEST_CASE("reconstruction_losses equals a hand-built forward pass") {
  const auto params = make_extractor(16, 8, 3);
  const auto phi = make_perceptual(4);
  const auto disc = make_discriminator(16, 5);
  const auto buf = generate_patch(PatchKind::Checker, 16, 9);
  const Tensor x = normalize_patch(buf.data(), 16);

  const ReconLosses got = reconstruction_losses(x, params, phi, disc);
  Graph g;
  const Var xv = leaf(x, false);
  const Var xhat = decode_forward(g, encode_forward(g, xv, params), params);
  const auto terms = recon_terms(g, xv, xhat, phi, &disc);
  CHECK(got.l1 == terms.l1->value.data[0]);
  CHECK(got.lpips_like == terms.lpips->value.data[0]);
  CHECK(got.gen_adv == terms.gen_adv->value.data[0]);
  CHECK(got.disc_adv == terms.disc_adv->value.data[0]);
}

TEST_CASE("training validates its inputs") {
  const auto small = family_mix("g", 63, 16, 1);
  CHECK_THROWS_AS(train_extractor(small, 16, 32, {}), Error);

  auto bad = family_mix("g", 64, 16, 1);
  bad[10].pop_back();
  CHECK_THROWS_AS(train_extractor(bad, 16, 32, {}), Error);

  const auto ok = family_mix("g", 64, 16, 1);
  ExtractorTrainConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(train_extractor(ok, 16, 32, cfg), Error);
  cfg.steps = 1;
  cfg.lr = -1.0;
  CHECK_THROWS_AS(train_extractor(ok, 16, 32, cfg), Error);
}

TEST_CASE("zero learning rate freezes the loss trace") {
  const auto patches = family_mix("gc", 64, 16, 50);
  ExtractorTrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 64;
  cfg.lr = 0.0;
  const auto res = train_extractor(patches, 16, 32, cfg);
  REQUIRE(res.trace.size() == 3);
  CHECK(res.trace[1] == res.trace[0]);
  CHECK(res.trace[2] == res.trace[0]);
}

TEST_CASE("overflow-scale learning rates raise DivergedLoss") {
  const auto patches = family_mix("g", 64, 16, 10);
  ExtractorTrainConfig cfg;
  cfg.steps = 6;
  cfg.batch = 8;
  cfg.lr = 1e140;
  CHECK_THROWS_WITH_AS(train_extractor(patches, 16, 32, cfg), doctest::Contains("non-finite"),
                       Error);
}

TEST_CASE("training is bit-deterministic for a fixed seed") {
  const auto patches = family_mix("gcn", 64, 16, 200);
  ExtractorTrainConfig cfg;
  cfg.steps = 25;
  cfg.batch = 8;
  const auto a = train_extractor(patches, 16, 16, cfg);
  const auto b = train_extractor(patches, 16, 16, cfg);
  CHECK(a.trace == b.trace);
  CHECK(stores_equal(a.params.store, b.params.store));
}

TEST_CASE("q-side training halves reconstruction error") {
  const auto patches = family_mix("gc", 256, 16, 100);
  ExtractorTrainConfig cfg;  // 500 steps, lr 1e-3
  const auto init = make_extractor(16, 32, derive_seed(cfg.seed, "extractor-init"));
  const auto res = train_extractor(patches, 16, 32, cfg);

  const double l1_init = dataset_mean_l1(patches, 16, init, res.phi);
  const double l1_final = dataset_mean_l1(patches, 16, res.params, res.phi);
  CHECK(l1_final < 0.5 * l1_init);
  CHECK(res.trace.back() < res.trace.front());

  // the perceptual net is untouched by training
  const auto fresh_phi = make_perceptual(derive_seed(cfg.seed, "perceptual"));
  CHECK(stores_equal(res.phi.store, fresh_phi.store));
}

TEST_CASE("identical constant patches approach the bias-only optimum") {
  const std::vector<std::vector<uint8_t>> patches(64, generate_patch(PatchKind::Constant, 16, 3));
  ExtractorTrainConfig cfg;
  cfg.lr = 3e-2;  // 500 steps
  const auto res = train_extractor(patches, 16, 32, cfg);
  CHECK(dataset_mean_l1(patches, 16, res.params, res.phi) < 1e-2);
}

TEST_CASE("trained features separate the texture families") {
  const auto patches = family_mix("gcn", 144, 16, 300);
  ExtractorTrainConfig cfg;
  cfg.steps = 300;
  const auto res = train_extractor(patches, 16, 32, cfg);
  std::vector<Tensor> feats;
  feats.reserve(patches.size());
  for (const auto& buf : patches)
    feats.push_back(encode(normalize_patch(buf.data(), 16), res.params));
  for (int fam = 0; fam < 3; ++fam) {
    double intra = 0.0, inter = 0.0;
    int n_intra = 0, n_inter = 0;
    for (std::size_t a = 0; a < feats.size(); ++a)
      for (std::size_t b = a + 1; b < feats.size(); ++b) {
        const bool a_in = static_cast<int>(a % 3) == fam;
        const bool b_in = static_cast<int>(b % 3) == fam;
        if (a_in && b_in) {
          intra += vec_dist(feats[a], feats[b]);
          ++n_intra;
        } else if (a_in || b_in) {
          inter += vec_dist(feats[a], feats[b]);
          ++n_inter;
        }
      }
    CHECK(intra / n_intra < inter / n_inter);
  }
}

TEST_CASE("p-side instance meets the same training contract") {
  const auto patches = family_mix("gc", 256, 64, 100);
  ExtractorTrainConfig cfg;  // 500 steps, lr 1e-3
  const auto init = make_extractor(64, 32, derive_seed(cfg.seed, "extractor-init"));
  const auto res = train_extractor(patches, 64, 32, cfg);
  const double l1_init = dataset_mean_l1(patches, 64, init, res.phi);
  const double l1_final = dataset_mean_l1(patches, 64, res.params, res.phi);
  CHECK(l1_final < 0.5 * l1_init);
  const auto fresh_phi = make_perceptual(derive_seed(cfg.seed, "perceptual"));
  CHECK(stores_equal(res.phi.store, fresh_phi.store));

  // separability holds for the p-side features as well
  const auto mix = family_mix("gcn", 72, 64, 300);
  ExtractorTrainConfig sep_cfg;
  sep_cfg.steps = 150;
  const auto sep = train_extractor(mix, 64, 32, sep_cfg);
  std::vector<Tensor> feats;
  feats.reserve(mix.size());
  for (const auto& buf : mix) feats.push_back(encode(normalize_patch(buf.data(), 64), sep.params));
  for (int fam = 0; fam < 3; ++fam) {
    double intra = 0.0, inter = 0.0;
    int n_intra = 0, n_inter = 0;
    for (std::size_t a = 0; a < feats.size(); ++a)
      for (std::size_t b = a + 1; b < feats.size(); ++b) {
        const bool a_in = static_cast<int>(a % 3) == fam;
        const bool b_in = static_cast<int>(b % 3) == fam;
        if (a_in && b_in) {
          intra += vec_dist(feats[a], feats[b]);
          ++n_intra;
        } else if (a_in || b_in) {
          inter += vec_dist(feats[a], feats[b]);
          ++n_inter;
        }
      }
    CHECK(intra / n_intra < inter / n_inter);
  }
}

TEST_CASE("adversarial training steps the discriminator and composes the loss") {
  const auto patches = family_mix("gc", 64, 16, 400);
  ExtractorTrainConfig cfg;
  cfg.steps = 8;
  cfg.batch = 64;
  cfg.adversarial = true;
  const auto res = train_extractor(patches, 16, 16, cfg);
  for (double v : res.trace) CHECK(std::isfinite(v));

  // first-step loss equals the mean of independently computed terms
  const auto init = make_extractor(16, 16, derive_seed(cfg.seed, "extractor-init"));
  const auto init_disc = make_discriminator(16, derive_seed(cfg.seed, "discriminator"));
  double expect = 0.0;
  for (const auto& buf : patches) {
    const auto l = reconstruction_losses(normalize_patch(buf.data(), 16), init, res.phi, init_disc);
    expect += l.l1 + l.lpips_like + l.gen_adv;
  }
  expect /= static_cast<double>(patches.size());
  CHECK(res.trace.front() == doctest::Approx(expect).epsilon(1e-12));

  // the discriminator moved away from its initialization
  CHECK_FALSE(stores_equal(res.disc.store, init_disc.store));
}

TEST_CASE("feature stores roundtrip exactly") {
  FeatureStore store;
  store.d = 4;
  store.cube_side = 2;
  Rng rng(31);
  for (int i = 0; i < 3; ++i) {
    FeatureRecord rec;
    rec.patch_id = i * 7;
    rec.grid_row = i;
    rec.grid_col = 2 - i;
    rec.global = Tensor({4});
    rec.cube = Tensor({2, 2, 4});
    for (auto& v : rec.global.data) v = static_cast<double>(static_cast<float>(rng.normal(0, 1)));
    for (auto& v : rec.cube.data) v = static_cast<double>(static_cast<float>(rng.normal(0, 1)));
    store.records.push_back(std::move(rec));
  }
  const auto path = (temp_dir() / "feat.isgf").string();
  save_feature_store(path, store);
  const auto back = load_feature_store(path);
  CHECK(back.d == store.d);
  CHECK(back.cube_side == store.cube_side);
  REQUIRE(back.records.size() == store.records.size());
  for (std::size_t i = 0; i < store.records.size(); ++i) {
    CHECK(back.records[i].patch_id == store.records[i].patch_id);
    CHECK(back.records[i].grid_row == store.records[i].grid_row);
    CHECK(back.records[i].grid_col == store.records[i].grid_col);
    CHECK(back.records[i].global.data == store.records[i].global.data);
    CHECK(back.records[i].cube.data == store.records[i].cube.data);
  }
  std::filesystem::remove(path);
}

TEST_CASE("feature store decoding rejects corruption") {
  FeatureStore store;
  store.d = 2;
  store.cube_side = 1;
  FeatureRecord rec;
  rec.global = Tensor({2});
  rec.cube = Tensor({1, 1, 2});
  store.records.push_back(rec);
  const std::string enc = encode_feature_store(store);

  auto as_bytes = [](const std::string& s) {
    return std::vector<uint8_t>(s.begin(), s.end());
  };
  auto bad_magic = enc;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_feature_store(as_bytes(bad_magic), "t"), Error);

  auto truncated = as_bytes(enc);
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_feature_store(truncated, "t"), Error);

  auto padded = as_bytes(enc);
  padded.push_back(0);
  CHECK_THROWS_AS(decode_feature_store(padded, "t"), Error);

  auto bad_version = as_bytes(enc);
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_feature_store(bad_version, "t"), Error);

  CHECK_THROWS_AS(load_feature_store((temp_dir() / "missing.isgf").string()), Error);
}
