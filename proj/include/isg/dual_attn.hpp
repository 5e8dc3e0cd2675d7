#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "isg/autodiff.hpp"
#include "isg/eval_harness.hpp"
#include "isg/feat_extract.hpp"
#include "isg/params.hpp"

namespace isg {

// Weights of one attention fusion step. w_q and w_z project the global
// vector onto the cube's spatial grid, so their first extent is cube_side^2;
// the remaining five are d x d.
struct FusionParams {
  Var w_q, w_k, w_v, w_r, w_z, w_p, w_f;
};

struct MbconvParams {
  Var expand_w, expand_b, dw_w, dw_b, project_w, project_b;
};

struct StackConfig {
  int blocks = 10;       // mbconv blocks (B)
  int fusion_every = 2;  // one fusion block after every k mbconv blocks
  int expand_ratio = 4;
};

struct VitConfig {
  int layers = 2;
  int heads = 4;
  int mlp_ratio = 4;  // mlp width = mlp_ratio * d
  int genes = 1;
  int token_cap = 256;
  bool positional = true;
};

struct PredictorParams {
  int d = 32;
  int cube_side = 4;
  StackConfig stack;
  VitConfig vit;
  ParamStore store;
};

PredictorParams make_predictor(int d, int cube_side, const StackConfig& stack,
                               const VitConfig& vit, uint64_t seed);

int fusion_count(const StackConfig& cfg);

// Views into the parameter store for fusion step t / mbconv block j.
FusionParams fusion_at(const PredictorParams& params, int t);
MbconvParams mbconv_at(const PredictorParams& params, int j);

// Query the cube with the global vector, gate per position with a sigmoid
// score, and remix channels: (sigmoid(Q . K) . V) W_r.
Var local_feature_update(Graph& g, const Var& f, const Var& cube, const FusionParams& p);

// Spatially softmax the projected global vector into a weight map, pool the
// projected cube under it, and remix: Sum(Z . P) W_f.
Var global_feature_update(Graph& g, const Var& f, const Var& cube, const FusionParams& p);

// 1x1 expand, relu, 3x3 depthwise, relu, 1x1 project, residual add.
Var mbconv_block(Graph& g, const Var& cube, const MbconvParams& p);

// B mbconv blocks with one parallel fusion update after every k-th; both
// updaters read the same incoming pair before either result replaces it.
std::pair<Var, Var> fused_stack(Graph& g, Var f, Var cube, const PredictorParams& params);

// One pooled cube with its normalized grid coordinates in [0, 1].
struct TokenInput {
  Tensor features{{1}};
  double row = 0.0;
  double col = 0.0;
};

// 2D sinusoidal encoding: first half of the channels from the row
// coordinate, second half from the column coordinate.
Tensor positional_encoding(double row, double col, int d);

// Pre-norm transformer encoder over the token rows, mean-pooled, then a
// linear head to the gene vector.
Var vit_forward(Graph& g, const std::vector<Var>& tokens,
                const std::vector<std::pair<double, double>>& coords,
                const PredictorParams& params);

GeneVector vit_predict(const std::vector<TokenInput>& tokens, const PredictorParams& params);

// Full slide forward: fused stack per record, pooled cubes as tokens. Token
// indices select which records participate (the cap may force a subsample);
// coordinates are normalized against the whole store's grid extent.
Var predict_slide(Graph& g, const FeatureStore& features,
                  const std::vector<std::size_t>& token_idx, const PredictorParams& params);

// Inference wrapper: uses every record, or a seeded uniform subsample when
// the store exceeds the token cap.
GeneVector predict_genes(const FeatureStore& features, const PredictorParams& params,
                         uint64_t seed);

struct LabeledSlide {
  std::string slide_id;
  FeatureStore features;
  GeneVector label;
};

struct PredictorTrainConfig {
  int epochs = 60;
  double lr = 3e-3;
  double momentum = 0.9;
  bool cosine_decay = true;  // anneal lr to 5% over the run
  uint64_t seed = 1;
};

struct PredictorTrainResult {
  PredictorParams params;
  std::vector<double> train_loss;  // per-epoch mean slide loss
  std::vector<double> val_pcc;     // per-epoch mean PCC across genes; empty without val slides
};

// Per-slide SGD on the mean-reduced L2 objective. Slides over the token cap
// contribute one fixed seeded subsample chosen up front. Genes whose held-out
// predictions come out constant contribute 0 to the epoch's validation PCC.
PredictorTrainResult train_predictor(const std::vector<LabeledSlide>& train,
                                     const std::vector<LabeledSlide>& val,
                                     const StackConfig& stack, const VitConfig& vit,
                                     const PredictorTrainConfig& cfg);

}  // namespace isg
