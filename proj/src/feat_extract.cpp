#include "isg/feat_extract.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "isg/binio.hpp"
#include "isg/optim.hpp"
#include "isg/rng.hpp"

namespace isg {

namespace {

constexpr uint32_t kFeatureStoreVersion = 1;

Tensor he_init(std::vector<int> shape, double fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in));
}

Tensor lin_init(std::vector<int> shape, double fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(1.0 / fan_in));
}

void add_conv(ParamStore& store, const std::string& name, int kh, int kw, int cin, int cout,
              Rng& rng, bool trainable = true) {
  store.add(name + ".w", he_init({kh, kw, cin, cout}, kh * kw * cin, rng), trainable);
  store.add(name + ".b", Tensor::zeros({cout}), trainable);
}

int encoder_flat(int side) { return (side / 8) * (side / 8) * 64; }

Var conv_relu(Graph& g, const Var& x, const ParamStore& store, const std::string& name,
              int stride) {
  return relu(g, conv2d(g, x, store.get(name + ".w"), store.get(name + ".b"), stride, 1));
}

}  // namespace

ExtractorParams make_extractor(int side, int d, uint64_t seed) {
  require(side >= 8 && side % 8 == 0, Err::InvalidConfig,
          "extractor side must be a positive multiple of 8, got " + std::to_string(side));
  require(d >= 1, Err::InvalidConfig, "feature dimension must be >= 1");
  ExtractorParams params;
  params.side = side;
  params.d = d;
  Rng rng(seed);
  const int flat = encoder_flat(side);
  add_conv(params.store, "enc.conv1", 3, 3, 3, 16, rng);
  add_conv(params.store, "enc.conv2", 3, 3, 16, 32, rng);
  add_conv(params.store, "enc.conv3", 3, 3, 32, 64, rng);
  params.store.add("enc.lin.w", lin_init({flat, d}, flat, rng));
  params.store.add("enc.lin.b", Tensor::zeros({d}));
  params.store.add("dec.lin.w", he_init({d, flat}, d, rng));
  params.store.add("dec.lin.b", Tensor::zeros({flat}));
  add_conv(params.store, "dec.conv1", 3, 3, 64, 32, rng);
  add_conv(params.store, "dec.conv2", 3, 3, 32, 16, rng);
  params.store.add("dec.conv3.w", lin_init({3, 3, 16, 3}, 9 * 16, rng));
  params.store.add("dec.conv3.b", Tensor::zeros({3}));
  return params;
}

PerceptualNet make_perceptual(uint64_t seed) {
  PerceptualNet net;
  Rng rng(seed);
  add_conv(net.store, "phi.conv1", 3, 3, 3, 8, rng, false);
  add_conv(net.store, "phi.conv2", 3, 3, 8, 16, rng, false);
  add_conv(net.store, "phi.conv3", 3, 3, 16, 32, rng, false);
  return net;
}

DiscriminatorParams make_discriminator(int side, uint64_t seed) {
  require(side >= 8 && side % 8 == 0, Err::InvalidConfig,
          "discriminator side must be a positive multiple of 8, got " + std::to_string(side));
  DiscriminatorParams disc;
  disc.side = side;
  Rng rng(seed);
  add_conv(disc.store, "disc.conv1", 3, 3, 3, 8, rng);
  add_conv(disc.store, "disc.conv2", 3, 3, 8, 16, rng);
  add_conv(disc.store, "disc.conv3", 3, 3, 16, 16, rng);
  const int flat = (side / 8) * (side / 8) * 16;
  disc.store.add("disc.lin.w", lin_init({flat, 1}, flat, rng));
  disc.store.add("disc.lin.b", Tensor::zeros({1}));
  return disc;
}

Var encode_forward(Graph& g, const Var& x, const ExtractorParams& params) {
  require(x->value.rank() == 3 && x->value.extent(0) == params.side &&
              x->value.extent(1) == params.side && x->value.extent(2) == 3,
          Err::WrongPatchSize,
          "encoder expects " + std::to_string(params.side) + "x" + std::to_string(params.side) +
              "x3 input, got " + x->value.shape_str());
  Var h = conv_relu(g, x, params.store, "enc.conv1", 2);
  h = conv_relu(g, h, params.store, "enc.conv2", 2);
  h = conv_relu(g, h, params.store, "enc.conv3", 2);
  h = reshape(g, h, {1, encoder_flat(params.side)});
  h = add_rowvec(g, matmul(g, h, params.store.get("enc.lin.w")), params.store.get("enc.lin.b"));
  return reshape(g, h, {params.d});
}

Var decode_forward(Graph& g, const Var& f, const ExtractorParams& params) {
  require(static_cast<int>(f->value.numel()) == params.d, Err::ShapeMismatch,
          "decoder expects a feature vector of length " + std::to_string(params.d));
  const int s8 = params.side / 8;
  Var h = reshape(g, f, {1, params.d});
  h = add_rowvec(g, matmul(g, h, params.store.get("dec.lin.w")), params.store.get("dec.lin.b"));
  h = relu(g, h);
  h = reshape(g, h, {s8, s8, 64});
  h = conv_relu(g, upsample_nearest2(g, h), params.store, "dec.conv1", 1);
  h = conv_relu(g, upsample_nearest2(g, h), params.store, "dec.conv2", 1);
  h = upsample_nearest2(g, h);
  h = conv2d(g, h, params.store.get("dec.conv3.w"), params.store.get("dec.conv3.b"), 1, 1);
  return sigmoid(g, h);
}

Var perceptual_forward(Graph& g, const Var& x, const PerceptualNet& net) {
  Var h = conv_relu(g, x, net.store, "phi.conv1", 2);
  h = conv_relu(g, h, net.store, "phi.conv2", 2);
  return conv_relu(g, h, net.store, "phi.conv3", 2);
}

Var discriminator_forward(Graph& g, const Var& x, const DiscriminatorParams& disc) {
  require(x->value.rank() == 3 && x->value.extent(0) == disc.side &&
              x->value.extent(1) == disc.side && x->value.extent(2) == 3,
          Err::WrongPatchSize, "discriminator input side mismatch: " + x->value.shape_str());
  Var h = conv_relu(g, x, disc.store, "disc.conv1", 2);
  h = conv_relu(g, h, disc.store, "disc.conv2", 2);
  h = conv_relu(g, h, disc.store, "disc.conv3", 2);
  const int flat = (disc.side / 8) * (disc.side / 8) * 16;
  h = reshape(g, h, {1, flat});
  h = add_rowvec(g, matmul(g, h, disc.store.get("disc.lin.w")), disc.store.get("disc.lin.b"));
  return reshape(g, h, {1});
}

Tensor normalize_patch(const uint8_t* data, int side) {
  require(side >= 1, Err::WrongPatchSize, "patch side must be >= 1");
  Tensor out({side, side, 3});
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = static_cast<double>(data[i]) / 255.0;
  return out;
}

Tensor encode(const Tensor& x, const ExtractorParams& params) {
  Graph g;
  const Var xv = leaf(x, false);
  const Var f = encode_forward(g, xv, params);
  for (double v : f->value.data)
    require(std::isfinite(v), Err::NonFiniteValue, "encoder produced a non-finite feature");
  return f->value;
}

Tensor encode(const GlobalPatch& patch, const ExtractorParams& params) {
  require(patch.side == params.side, Err::WrongPatchSize,
          "patch side " + std::to_string(patch.side) + " does not match extractor side " +
              std::to_string(params.side));
  require(patch.pixels.size() == static_cast<std::size_t>(patch.side) * patch.side * 3,
          Err::WrongPatchSize, "patch buffer does not match its declared side");
  return encode(normalize_patch(patch.pixels.data(), patch.side), params);
}

Tensor build_local_cube(const LocalPatchGrid& grid, const ExtractorParams& params) {
  const int s = grid.grid;
  require(s >= 1, Err::ShapeMismatch, "local grid is empty");
  require(grid.side == params.side, Err::WrongPatchSize,
          "fine patch side " + std::to_string(grid.side) + " does not match extractor side " +
              std::to_string(params.side));
  require(grid.patches.size() == static_cast<std::size_t>(s) * s, Err::ShapeMismatch,
          "local grid is incomplete: " + std::to_string(grid.patches.size()) + " of " +
              std::to_string(s * s) + " fine patches");
  const std::size_t expected = static_cast<std::size_t>(grid.side) * grid.side * 3;
  Tensor cube({s, s, params.d});
  for (std::size_t cell = 0; cell < grid.patches.size(); ++cell) {
    const auto& buf = grid.patches[cell];
    require(buf.size() == expected, Err::WrongPatchSize,
            "fine patch buffer does not match its declared side");
    const Tensor f = encode(normalize_patch(buf.data(), grid.side), params);
    std::copy(f.data.begin(), f.data.end(),
              cube.data.begin() + static_cast<std::ptrdiff_t>(cell * params.d));
  }
  return cube;
}

ReconTerms recon_terms(Graph& g, const Var& x, const Var& xhat, const PerceptualNet& phi,
                       const DiscriminatorParams* disc) {
  require(same_shape(x->value, xhat->value), Err::ShapeMismatch,
          "reconstruction shape " + xhat->value.shape_str() + " does not match input " +
              x->value.shape_str());
  ReconTerms terms;
  terms.l1 = l1_loss(g, xhat, x);
  terms.lpips = l2_distance(g, perceptual_forward(g, x, phi), perceptual_forward(g, xhat, phi));
  if (disc) {
    const Var logit_real = discriminator_forward(g, x, *disc);
    const Var logit_fake = discriminator_forward(g, xhat, *disc);
    terms.gen_adv = softplus(g, scale(g, logit_fake, -1.0));
    terms.disc_adv = add(g, softplus(g, scale(g, logit_real, -1.0)), softplus(g, logit_fake));
  }
  return terms;
}

ReconLosses reconstruction_losses(const Tensor& x, const ExtractorParams& params,
                                  const PerceptualNet& phi, const DiscriminatorParams& disc) {
  Graph g;
  const Var xv = leaf(x, false);
  const Var xhat = decode_forward(g, encode_forward(g, xv, params), params);
  const ReconTerms terms = recon_terms(g, xv, xhat, phi, &disc);
  return {terms.l1->value.data[0], terms.lpips->value.data[0], terms.gen_adv->value.data[0],
          terms.disc_adv->value.data[0]};
}

ExtractorTrainResult train_extractor(const std::vector<std::vector<uint8_t>>& patches, int side,
                                     int d, const ExtractorTrainConfig& cfg) {
  require(patches.size() >= 64, Err::EmptyDataset,
          "extractor training needs at least 64 patches, got " + std::to_string(patches.size()));
  require(cfg.steps >= 1 && cfg.batch >= 1, Err::InvalidConfig,
          "training steps and batch size must be >= 1");
  require(cfg.lr >= 0.0 && cfg.disc_lr >= 0.0 && cfg.momentum >= 0.0 && cfg.momentum < 1.0,
          Err::InvalidConfig, "invalid optimizer settings");

  const std::size_t expected = static_cast<std::size_t>(side) * side * 3;
  std::vector<Tensor> data;
  data.reserve(patches.size());
  for (const auto& buf : patches) {
    require(buf.size() == expected, Err::WrongPatchSize,
            "training patch byte count does not match the configured side");
    data.push_back(normalize_patch(buf.data(), side));
  }

  ExtractorTrainResult result;
  result.params = make_extractor(side, d, derive_seed(cfg.seed, "extractor-init"));
  result.phi = make_perceptual(derive_seed(cfg.seed, "perceptual"));
  if (cfg.adversarial)
    result.disc = make_discriminator(side, derive_seed(cfg.seed, "discriminator"));
  PerceptualNet& phi = result.phi;
  DiscriminatorParams& disc = result.disc;

  SgdMomentum opt(cfg.lr, cfg.momentum);
  SgdMomentum disc_opt(cfg.disc_lr, cfg.momentum);
  Rng batch_rng(derive_seed(cfg.seed, "batches"));

  const int n = static_cast<int>(data.size());
  const int batch = std::min(cfg.batch, n);
  std::vector<int> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<int> chosen(static_cast<std::size_t>(batch));

  result.trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    // sample without replacement, then process in ascending patch order
    for (int j = 0; j < batch; ++j) {
      const int k = j + static_cast<int>(batch_rng.uniform_int(0, n - 1 - j));
      std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(k)]);
      chosen[static_cast<std::size_t>(j)] = pool[static_cast<std::size_t>(j)];
    }
    std::sort(chosen.begin(), chosen.end());

    Graph g;
    Var total;
    std::vector<Var> fakes;
    fakes.reserve(chosen.size());
    for (int idx : chosen) {
      const Var xv = leaf(data[static_cast<std::size_t>(idx)], false);
      const Var xhat = decode_forward(g, encode_forward(g, xv, result.params), result.params);
      const ReconTerms terms =
          recon_terms(g, xv, xhat, phi, cfg.adversarial ? &disc : nullptr);
      Var sample = add(g, terms.l1, terms.lpips);
      if (cfg.adversarial) {
        sample = add(g, sample, terms.gen_adv);
        fakes.push_back(xhat);
      }
      total = total ? add(g, total, sample) : sample;
    }
    const Var loss = scale(g, total, 1.0 / batch);
    const double loss_val = loss->value.data[0];
    require(std::isfinite(loss_val), Err::DivergedLoss,
            "training loss became non-finite at step " + std::to_string(step));
    result.trace.push_back(loss_val);

    result.params.store.zero_grads();
    if (cfg.adversarial) disc.store.zero_grads();
    g.backward(loss);
    opt.step(result.params.store.trainable());

    if (cfg.adversarial) {
      // discriminator pass on the same batch with reconstructions detached
      Graph dg;
      Var dtotal;
      for (std::size_t j = 0; j < chosen.size(); ++j) {
        const Var xv = leaf(data[static_cast<std::size_t>(chosen[j])], false);
        const Var fake = leaf(fakes[j]->value, false);
        const Var logit_real = discriminator_forward(dg, xv, disc);
        const Var logit_fake = discriminator_forward(dg, fake, disc);
        const Var sample =
            add(dg, softplus(dg, scale(dg, logit_real, -1.0)), softplus(dg, logit_fake));
        dtotal = dtotal ? add(dg, dtotal, sample) : sample;
      }
      const Var dloss = scale(dg, dtotal, 1.0 / batch);
      require(std::isfinite(dloss->value.data[0]), Err::DivergedLoss,
              "discriminator loss became non-finite at step " + std::to_string(step));
      disc.store.zero_grads();
      dg.backward(dloss);
      disc_opt.step(disc.store.trainable());
    }
  }
  return result;
}

std::string encode_feature_store(const FeatureStore& store) {
  require(store.d >= 1 && store.cube_side >= 1, Err::InvalidConfig,
          "feature store dimensions must be >= 1");
  std::string out;
  out += "ISGF";
  put_u32le(out, kFeatureStoreVersion);
  put_u32le(out, static_cast<uint32_t>(store.d));
  put_u32le(out, static_cast<uint32_t>(store.cube_side));
  put_u32le(out, static_cast<uint32_t>(store.records.size()));
  const std::size_t cube_len =
      static_cast<std::size_t>(store.cube_side) * store.cube_side * store.d;
  for (const auto& rec : store.records) {
    require(rec.global.numel() == static_cast<std::size_t>(store.d), Err::ShapeMismatch,
            "global feature length does not match the store dimension");
    require(rec.cube.numel() == cube_len, Err::ShapeMismatch,
            "local cube size does not match the store dimensions");
    put_u32le(out, static_cast<uint32_t>(rec.patch_id));
    put_u32le(out, static_cast<uint32_t>(rec.grid_row));
    put_u32le(out, static_cast<uint32_t>(rec.grid_col));
    for (double v : rec.global.data) put_f32le(out, static_cast<float>(v));
    for (double v : rec.cube.data) put_f32le(out, static_cast<float>(v));
  }
  return out;
}

FeatureStore decode_feature_store(const std::vector<uint8_t>& bytes, const std::string& origin) {
  ByteReader reader(bytes.data(), bytes.size(), origin);
  require(reader.bytes(4) == "ISGF", Err::CorruptData, origin + ": bad feature store magic");
  const uint32_t version = reader.u32le();
  require(version == kFeatureStoreVersion, Err::CorruptData,
          origin + ": unsupported feature store version " + std::to_string(version));
  FeatureStore store;
  const uint32_t d = reader.u32le();
  const uint32_t cube_side = reader.u32le();
  const uint32_t count = reader.u32le();
  require(d >= 1 && d <= 65536, Err::CorruptData, origin + ": implausible feature dimension");
  require(cube_side >= 1 && cube_side <= 4096, Err::CorruptData,
          origin + ": implausible cube side");
  store.d = static_cast<int>(d);
  store.cube_side = static_cast<int>(cube_side);
  store.records.reserve(count);
  const int s = store.cube_side;
  for (uint32_t i = 0; i < count; ++i) {
    FeatureRecord rec;
    rec.patch_id = static_cast<int>(reader.u32le());
    rec.grid_row = static_cast<int>(reader.u32le());
    rec.grid_col = static_cast<int>(reader.u32le());
    rec.global = Tensor({store.d});
    for (auto& v : rec.global.data) v = reader.f32le();
    rec.cube = Tensor({s, s, store.d});
    for (auto& v : rec.cube.data) v = reader.f32le();
    store.records.push_back(std::move(rec));
  }
  require(reader.remaining() == 0, Err::CorruptData,
          origin + ": trailing bytes after the last feature record");
  return store;
}

void save_feature_store(const std::string& path, const FeatureStore& store) {
  write_file_bytes(path, encode_feature_store(store));
}

FeatureStore load_feature_store(const std::string& path) {
  return decode_feature_store(read_file_bytes(path), path);
}

}  // namespace isg
