#include "isg/dual_attn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "isg/conv.hpp"
#include "isg/optim.hpp"
#include "isg/rng.hpp"

namespace isg {

namespace {

Var add_matrix(ParamStore& store, const std::string& name, std::vector<int> shape, Rng& rng,
               double sigma) {
  return store.add(name, Tensor::randn(std::move(shape), rng, sigma));
}

// identity times `gain` plus a small symmetry-breaking perturbation, so a
// freshly built fusion step passes features through almost unchanged
Var add_near_identity(ParamStore& store, const std::string& name, int d, double gain, Rng& rng) {
  Tensor w = Tensor::randn({d, d}, rng, 0.02);
  for (int i = 0; i < d; ++i) w.data[static_cast<std::size_t>(i) * d + i] += gain;
  return store.add(name, std::move(w));
}

void add_vit_layer(ParamStore& store, const std::string& prefix, int d, int mlp, Rng& rng) {
  const double lin = std::sqrt(1.0 / d);
  store.add(prefix + ".ln1.g", Tensor::full({d}, 1.0));
  store.add(prefix + ".ln1.b", Tensor({d}));
  for (const char* part : {"wq", "wk", "wv", "wo"})
    add_matrix(store, prefix + ".attn." + part, {d, d}, rng, lin);
  for (const char* part : {"bq", "bk", "bv", "bo"})
    store.add(prefix + std::string(".attn.") + part, Tensor({d}));
  store.add(prefix + ".ln2.g", Tensor::full({d}, 1.0));
  store.add(prefix + ".ln2.b", Tensor({d}));
  add_matrix(store, prefix + ".mlp.w1", {d, mlp}, rng, std::sqrt(2.0 / d));
  store.add(prefix + ".mlp.b1", Tensor({mlp}));
  add_matrix(store, prefix + ".mlp.w2", {mlp, d}, rng, std::sqrt(1.0 / mlp));
  store.add(prefix + ".mlp.b2", Tensor({d}));
}

// per-position application of a d x d map to a cube's channel vectors
Var cube_matmul(Graph& g, const Var& cube, const Var& w) {
  const int s0 = cube->value.extent(0), s1 = cube->value.extent(1);
  const int d = cube->value.extent(2);
  auto flat = reshape(g, cube, {s0 * s1, d});
  return reshape(g, matmul(g, flat, w), {s0, s1, w->value.extent(1)});
}

// project the global vector onto the spatial grid: (s^2 x d)(d x 1) -> s x s x 1
Var grid_projection(Graph& g, const Var& f, const Var& w, int s) {
  auto col = reshape(g, f, {static_cast<int>(f->value.numel()), 1});
  return reshape(g, matmul(g, w, col), {s, s, 1});
}

void check_fusion_inputs(const Var& f, const Var& cube, const FusionParams& p) {
  require(cube->value.rank() == 3 && cube->value.extent(0) == cube->value.extent(1),
          Err::ShapeMismatch, "fusion cube must be s x s x d, got " + cube->value.shape_str());
  const int s = cube->value.extent(0);
  const int d = cube->value.extent(2);
  require(static_cast<int>(f->value.numel()) == d, Err::ShapeMismatch,
          "global vector length does not match cube channels");
  require(p.w_q->value.rank() == 2 && p.w_q->value.extent(0) == s * s &&
              p.w_q->value.extent(1) == d,
          Err::ShapeMismatch, "w_q must be cube_side^2 x d, got " + p.w_q->value.shape_str());
  require(p.w_z->value.rank() == 2 && p.w_z->value.extent(0) == s * s &&
              p.w_z->value.extent(1) == d,
          Err::ShapeMismatch, "w_z must be cube_side^2 x d, got " + p.w_z->value.shape_str());
}

}  // namespace

int fusion_count(const StackConfig& cfg) { return cfg.blocks / cfg.fusion_every; }

PredictorParams make_predictor(int d, int cube_side, const StackConfig& stack,
                               const VitConfig& vit, uint64_t seed) {
  require(d >= 1 && cube_side >= 1, Err::InvalidConfig, "predictor needs d >= 1, cube_side >= 1");
  require(stack.blocks >= 1, Err::InvalidConfig, "stack needs at least one mbconv block");
  require(stack.fusion_every >= 1 && stack.fusion_every <= stack.blocks, Err::InvalidConfig,
          "fusion interval must lie in [1, blocks]");
  require(stack.expand_ratio >= 1, Err::InvalidConfig, "expand ratio must be >= 1");
  require(vit.layers >= 1 && vit.heads >= 1 && vit.mlp_ratio >= 1, Err::InvalidConfig,
          "vit needs layers, heads, mlp_ratio >= 1");
  require(d % vit.heads == 0, Err::InvalidConfig, "d must be divisible by the head count");
  require(vit.genes >= 1, Err::InvalidConfig, "vit needs at least one output gene");
  require(vit.token_cap >= 1, Err::InvalidConfig, "token cap must be >= 1");

  PredictorParams params;
  params.d = d;
  params.cube_side = cube_side;
  params.stack = stack;
  params.vit = vit;
  Rng rng(seed);
  const int e = stack.expand_ratio * d;
  const int s2 = cube_side * cube_side;
  const double lin = std::sqrt(1.0 / d);

  // Residual branches start silent (zero projection) and fusion steps start
  // near identity: the query and score projections are small so every gate
  // opens at sigmoid(0) = 0.5, w_r = 2I cancels the half-open gate, and the
  // global update reduces to a spatial mean. Deep stacks then pass the
  // encoder signal through unchanged until training shapes them.
  for (int j = 0; j < stack.blocks; ++j) {
    const std::string prefix = "mb" + std::to_string(j);
    add_matrix(params.store, prefix + ".expand.w", {1, 1, d, e}, rng, std::sqrt(2.0 / d));
    params.store.add(prefix + ".expand.b", Tensor({e}));
    add_matrix(params.store, prefix + ".dw.w", {3, 3, e}, rng, std::sqrt(2.0 / 9.0));
    params.store.add(prefix + ".dw.b", Tensor({e}));
    params.store.add(prefix + ".project.w", Tensor({1, 1, e, d}));
    params.store.add(prefix + ".project.b", Tensor({d}));
  }
  for (int t = 0; t < fusion_count(stack); ++t) {
    const std::string prefix = "fuse" + std::to_string(t);
    add_matrix(params.store, prefix + ".w_q", {s2, d}, rng, 0.05);
    add_matrix(params.store, prefix + ".w_k", {d, d}, rng, lin);
    add_near_identity(params.store, prefix + ".w_v", d, 1.0, rng);
    add_near_identity(params.store, prefix + ".w_r", d, 2.0, rng);
    add_matrix(params.store, prefix + ".w_z", {s2, d}, rng, 0.05);
    add_near_identity(params.store, prefix + ".w_p", d, 1.0, rng);
    add_near_identity(params.store, prefix + ".w_f", d, 1.0, rng);
  }
  for (int l = 0; l < vit.layers; ++l)
    add_vit_layer(params.store, "vit" + std::to_string(l), d, vit.mlp_ratio * d, rng);
  params.store.add("vit.ln.g", Tensor::full({d}, 1.0));
  params.store.add("vit.ln.b", Tensor({d}));
  // a silent head makes the initial prediction exactly zero
  params.store.add("head.w", Tensor({d, vit.genes}));
  params.store.add("head.b", Tensor({vit.genes}));
  return params;
}

FusionParams fusion_at(const PredictorParams& params, int t) {
  require(t >= 0 && t < fusion_count(params.stack), Err::InvalidConfig,
          "fusion block index out of range: " + std::to_string(t));
  const std::string prefix = "fuse" + std::to_string(t);
  return {params.store.get(prefix + ".w_q"), params.store.get(prefix + ".w_k"),
          params.store.get(prefix + ".w_v"), params.store.get(prefix + ".w_r"),
          params.store.get(prefix + ".w_z"), params.store.get(prefix + ".w_p"),
          params.store.get(prefix + ".w_f")};
}

MbconvParams mbconv_at(const PredictorParams& params, int j) {
  require(j >= 0 && j < params.stack.blocks, Err::InvalidConfig,
          "mbconv block index out of range: " + std::to_string(j));
  const std::string prefix = "mb" + std::to_string(j);
  return {params.store.get(prefix + ".expand.w"),  params.store.get(prefix + ".expand.b"),
          params.store.get(prefix + ".dw.w"),      params.store.get(prefix + ".dw.b"),
          params.store.get(prefix + ".project.w"), params.store.get(prefix + ".project.b")};
}

Var local_feature_update(Graph& g, const Var& f, const Var& cube, const FusionParams& p) {
  check_fusion_inputs(f, cube, p);
  const int s = cube->value.extent(0);
  auto q = grid_projection(g, f, p.w_q, s);
  auto k = cube_matmul(g, cube, p.w_k);
  auto v = cube_matmul(g, cube, p.w_v);
  auto a = sigmoid(g, hadamard_broadcast(g, q, k));
  return cube_matmul(g, hadamard(g, a, v), p.w_r);
}

Var global_feature_update(Graph& g, const Var& f, const Var& cube, const FusionParams& p) {
  check_fusion_inputs(f, cube, p);
  const int s = cube->value.extent(0);
  const int d = cube->value.extent(2);
  auto z = softmax_spatial(g, grid_projection(g, f, p.w_z, s));
  auto pm = cube_matmul(g, cube, p.w_p);
  auto pooled = sum_spatial(g, hadamard_broadcast(g, z, pm));
  return reshape(g, matmul(g, reshape(g, pooled, {1, d}), p.w_f), {d});
}

Var mbconv_block(Graph& g, const Var& cube, const MbconvParams& p) {
  require(cube->value.rank() == 3, Err::ShapeMismatch, "mbconv input must be s x s x d");
  auto h = relu(g, conv2d(g, cube, p.expand_w, p.expand_b, 1, 0));
  h = relu(g, conv2d_depthwise(g, h, p.dw_w, p.dw_b, 1, 1));
  h = conv2d(g, h, p.project_w, p.project_b, 1, 0);
  return add(g, cube, h);
}

std::pair<Var, Var> fused_stack(Graph& g, Var f, Var cube, const PredictorParams& params) {
  require(cube->value.rank() == 3 && cube->value.extent(0) == params.cube_side &&
              cube->value.extent(1) == params.cube_side && cube->value.extent(2) == params.d,
          Err::ShapeMismatch, "fused_stack cube shape mismatch: " + cube->value.shape_str());
  require(static_cast<int>(f->value.numel()) == params.d, Err::ShapeMismatch,
          "fused_stack global vector length mismatch");
  int next_fusion = 0;
  for (int j = 1; j <= params.stack.blocks; ++j) {
    cube = mbconv_block(g, cube, mbconv_at(params, j - 1));
    if (j % params.stack.fusion_every == 0) {
      const auto fp = fusion_at(params, next_fusion++);
      // parallel update: both sides read the same incoming pair
      Var new_cube = local_feature_update(g, f, cube, fp);
      Var new_f = global_feature_update(g, f, cube, fp);
      cube = new_cube;
      f = new_f;
    }
  }
  return {f, cube};
}

Tensor positional_encoding(double row, double col, int d) {
  require(d >= 1, Err::InvalidConfig, "positional encoding needs d >= 1");
  Tensor out({d});
  const int half = d / 2;
  auto fill = [&](int offset, int width, double pos) {
    for (int c = 0; c < width; ++c) {
      const int pair = c / 2;
      const double angle = pos / std::pow(10000.0, 2.0 * pair / std::max(width, 1));
      out.data[static_cast<std::size_t>(offset + c)] =
          (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  };
  fill(0, half, row);
  fill(half, d - half, col);
  return out;
}

Var vit_forward(Graph& g, const std::vector<Var>& tokens,
                const std::vector<std::pair<double, double>>& coords,
                const PredictorParams& params) {
  require(!tokens.empty(), Err::EmptyTokenList, "vit_forward needs at least one token");
  require(static_cast<int>(tokens.size()) <= params.vit.token_cap, Err::TooManyTokens,
          "token count " + std::to_string(tokens.size()) + " exceeds cap " +
              std::to_string(params.vit.token_cap));
  require(coords.size() == tokens.size(), Err::ShapeMismatch,
          "vit_forward needs one coordinate pair per token");
  const int d = params.d;
  for (const auto& t : tokens)
    require(static_cast<int>(t->value.numel()) == d, Err::ShapeMismatch,
            "token length does not match model dim");

  Var x = stack_rows(g, tokens);
  if (params.vit.positional) {
    Tensor pe({static_cast<int>(tokens.size()), d});
    for (std::size_t r = 0; r < coords.size(); ++r) {
      const Tensor row_pe = positional_encoding(coords[r].first, coords[r].second, d);
      std::copy(row_pe.data.begin(), row_pe.data.end(),
                pe.data.begin() + static_cast<std::ptrdiff_t>(r) * d);
    }
    x = add(g, x, leaf(std::move(pe)));
  }

  const int heads = params.vit.heads;
  const int dh = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < params.vit.layers; ++l) {
    const std::string prefix = "vit" + std::to_string(l);
    auto get = [&](const char* name) { return params.store.get(prefix + name); };

    auto h = layer_norm(g, x, get(".ln1.g"), get(".ln1.b"));
    auto q = add_rowvec(g, matmul(g, h, get(".attn.wq")), get(".attn.bq"));
    auto k = add_rowvec(g, matmul(g, h, get(".attn.wk")), get(".attn.bk"));
    auto v = add_rowvec(g, matmul(g, h, get(".attn.wv")), get(".attn.bv"));
    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int i = 0; i < heads; ++i) {
      auto qs = slice_cols(g, q, i * dh, dh);
      auto ks = slice_cols(g, k, i * dh, dh);
      auto vs = slice_cols(g, v, i * dh, dh);
      auto att = softmax_rows(g, scale(g, matmul(g, qs, transpose(g, ks)), att_scale));
      head_outs.push_back(matmul(g, att, vs));
    }
    auto merged = heads == 1 ? head_outs[0] : concat_cols(g, head_outs);
    x = add(g, x, add_rowvec(g, matmul(g, merged, get(".attn.wo")), get(".attn.bo")));

    auto h2 = layer_norm(g, x, get(".ln2.g"), get(".ln2.b"));
    auto mid = gelu(g, add_rowvec(g, matmul(g, h2, get(".mlp.w1")), get(".mlp.b1")));
    x = add(g, x, add_rowvec(g, matmul(g, mid, get(".mlp.w2")), get(".mlp.b2")));
  }

  x = layer_norm(g, x, params.store.get("vit.ln.g"), params.store.get("vit.ln.b"));
  auto pooled = reshape(g, mean_rows(g, x), {1, d});
  auto out = add_rowvec(g, matmul(g, pooled, params.store.get("head.w")),
                        params.store.get("head.b"));
  return reshape(g, out, {params.vit.genes});
}

GeneVector vit_predict(const std::vector<TokenInput>& tokens, const PredictorParams& params) {
  Graph g;
  std::vector<Var> vars;
  std::vector<std::pair<double, double>> coords;
  vars.reserve(tokens.size());
  coords.reserve(tokens.size());
  for (const auto& t : tokens) {
    vars.push_back(leaf(t.features));
    coords.emplace_back(t.row, t.col);
  }
  const Var out = vit_forward(g, vars, coords, params);
  GeneVector result(out->value.data.begin(), out->value.data.end());
  for (double v : result)
    require(std::isfinite(v), Err::NonFiniteValue, "vit prediction is not finite");
  return result;
}

namespace {

std::pair<double, double> grid_extent(const FeatureStore& fs) {
  int max_row = 0, max_col = 0;
  for (const auto& rec : fs.records) {
    max_row = std::max(max_row, rec.grid_row);
    max_col = std::max(max_col, rec.grid_col);
  }
  return {static_cast<double>(max_row + 1), static_cast<double>(max_col + 1)};
}

// sorted sample without replacement; identity when count fits the cap
std::vector<std::size_t> pick_tokens(std::size_t count, int cap, Rng& rng) {
  std::vector<std::size_t> pool(count);
  std::iota(pool.begin(), pool.end(), 0);
  if (count <= static_cast<std::size_t>(cap)) return pool;
  for (std::size_t i = 0; i < static_cast<std::size_t>(cap); ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_int(
                           0, static_cast<int64_t>(count - i) - 1));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(cap));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

Var predict_slide(Graph& g, const FeatureStore& features,
                  const std::vector<std::size_t>& token_idx, const PredictorParams& params) {
  require(!features.records.empty(), Err::EmptyDataset, "feature store has no records");
  const auto [rows, cols] = grid_extent(features);
  std::vector<Var> tokens;
  std::vector<std::pair<double, double>> coords;
  tokens.reserve(token_idx.size());
  coords.reserve(token_idx.size());
  for (std::size_t idx : token_idx) {
    require(idx < features.records.size(), Err::InvalidConfig, "token index out of range");
    const auto& rec = features.records[idx];
    auto [f, cube] = fused_stack(g, leaf(rec.global), leaf(rec.cube), params);
    (void)f;  // the final global vector steered the stack; the vit reads cubes
    tokens.push_back(mean_pool_spatial(g, cube));
    coords.emplace_back(rec.grid_row / rows, rec.grid_col / cols);
  }
  return vit_forward(g, tokens, coords, params);
}

GeneVector predict_genes(const FeatureStore& features, const PredictorParams& params,
                         uint64_t seed) {
  Rng rng(seed);
  const auto idx = pick_tokens(features.records.size(), params.vit.token_cap, rng);
  Graph g;
  const Var out = predict_slide(g, features, idx, params);
  GeneVector result(out->value.data.begin(), out->value.data.end());
  for (double v : result)
    require(std::isfinite(v), Err::NonFiniteValue, "slide prediction is not finite");
  return result;
}

namespace {

void check_slides(const std::vector<LabeledSlide>& slides, int d, int cube_side,
                  std::size_t genes) {
  for (const auto& slide : slides) {
    require(!slide.features.records.empty(), Err::EmptyDataset,
            "slide has no selected patches: " + slide.slide_id);
    require(slide.features.d == d && slide.features.cube_side == cube_side, Err::ShapeMismatch,
            "feature dims differ across slides: " + slide.slide_id);
    require(slide.label.size() == genes, Err::ShapeMismatch,
            "label length differs across slides: " + slide.slide_id);
    for (double v : slide.label)
      require(std::isfinite(v), Err::NonFiniteValue, "label is not finite: " + slide.slide_id);
  }
}

}  // namespace

PredictorTrainResult train_predictor(const std::vector<LabeledSlide>& train,
                                     const std::vector<LabeledSlide>& val,
                                     const StackConfig& stack, const VitConfig& vit,
                                     const PredictorTrainConfig& cfg) {
  require(!train.empty(), Err::EmptyDataset, "train_predictor needs at least one slide");
  require(cfg.epochs >= 1, Err::InvalidConfig, "train_predictor needs epochs >= 1");
  require(cfg.lr >= 0.0 && std::isfinite(cfg.lr), Err::InvalidConfig, "bad learning rate");
  require(cfg.momentum >= 0.0 && cfg.momentum < 1.0, Err::InvalidConfig, "bad momentum");
  const std::size_t genes = train[0].label.size();
  require(genes >= 1, Err::ShapeMismatch, "labels must carry at least one gene");
  require(static_cast<std::size_t>(vit.genes) == genes, Err::ShapeMismatch,
          "vit.genes does not match label length");
  const int d = train[0].features.d;
  const int cube_side = train[0].features.cube_side;
  check_slides(train, d, cube_side, genes);
  check_slides(val, d, cube_side, genes);

  PredictorTrainResult result;
  result.params = make_predictor(d, cube_side, stack, vit,
                                 derive_seed(cfg.seed, "predictor-init"));
  auto& params = result.params;

  // fixed per-slide token subsets, drawn once so the objective is stable
  Rng tok_rng(derive_seed(cfg.seed, "token-subsample"));
  std::vector<std::vector<std::size_t>> train_tokens, val_tokens;
  train_tokens.reserve(train.size());
  for (const auto& slide : train)
    train_tokens.push_back(pick_tokens(slide.features.records.size(), vit.token_cap, tok_rng));
  val_tokens.reserve(val.size());
  for (const auto& slide : val)
    val_tokens.push_back(pick_tokens(slide.features.records.size(), vit.token_cap, tok_rng));

  Rng shuffle_rng(derive_seed(cfg.seed, "epoch-shuffle"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  SgdMomentum opt(cfg.lr, cfg.momentum);
  result.train_loss.reserve(static_cast<std::size_t>(cfg.epochs));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.cosine_decay) {
      const double t = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 0.0;
      opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(3.141592653589793 * t)));
    }
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(
          shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    for (std::size_t idx : order) {
      Graph g;
      const Var pred = predict_slide(g, train[idx].features, train_tokens[idx], params);
      Tensor target({static_cast<int>(genes)});
      std::copy(train[idx].label.begin(), train[idx].label.end(), target.data.begin());
      const Var loss = l2_loss(g, pred, leaf(std::move(target)));
      const double lv = loss->value.data[0];
      require(std::isfinite(lv), Err::DivergedLoss,
              "training loss became non-finite at epoch " + std::to_string(epoch));
      epoch_loss += lv;
      params.store.zero_grads();
      g.backward(loss);
      opt.step(params.store.trainable());
    }
    result.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));

    if (!val.empty()) {
      std::vector<GeneVector> preds;
      preds.reserve(val.size());
      for (std::size_t i = 0; i < val.size(); ++i) {
        Graph g;
        const Var out = predict_slide(g, val[i].features, val_tokens[i], params);
        preds.emplace_back(out->value.data.begin(), out->value.data.end());
      }
      double gene_sum = 0.0;
      for (std::size_t gene = 0; gene < genes; ++gene) {
        std::vector<double> p, t;
        p.reserve(val.size());
        t.reserve(val.size());
        for (std::size_t i = 0; i < val.size(); ++i) {
          p.push_back(preds[i][gene]);
          t.push_back(val[i].label[gene]);
        }
        try {
          gene_sum += pcc(p, t);
        } catch (const Error& e) {
          if (e.code() != Err::ConstantInput) throw;
        }
      }
      result.val_pcc.push_back(gene_sum / static_cast<double>(genes));
    }
  }
  return result;
}

}  // namespace isg
