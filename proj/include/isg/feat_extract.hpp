#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "isg/autodiff.hpp"
#include "isg/conv.hpp"
#include "isg/params.hpp"
#include "isg/slide_io.hpp"

namespace isg {

// Symmetric conv autoencoder. Encoder halves the side three times
// (3 -> 16 -> 32 -> 64 channels) then maps to a d-vector; the decoder
// mirrors it with nearest-neighbor upsampling and a sigmoid output.
struct ExtractorParams {
  int side = 64;
  int d = 32;
  ParamStore store;
};

ExtractorParams make_extractor(int side, int d, uint64_t seed);

// Fixed random conv stack used as a perceptual reference. Never trained;
// weights are created with requires_grad off so optimizers cannot touch it.
struct PerceptualNet {
  ParamStore store;
};

PerceptualNet make_perceptual(uint64_t seed);

// Patch-to-logit conv classifier for the adversarial term.
struct DiscriminatorParams {
  int side = 64;
  ParamStore store;
};

DiscriminatorParams make_discriminator(int side, uint64_t seed);

// Graph-building forward passes shared by training and inference.
Var encode_forward(Graph& g, const Var& x, const ExtractorParams& params);
Var decode_forward(Graph& g, const Var& f, const ExtractorParams& params);
Var perceptual_forward(Graph& g, const Var& x, const PerceptualNet& net);
Var discriminator_forward(Graph& g, const Var& x, const DiscriminatorParams& disc);

// side x side x 3 tensor scaled to [0, 1]
Tensor normalize_patch(const uint8_t* data, int side);

Tensor encode(const Tensor& x, const ExtractorParams& params);
Tensor encode(const GlobalPatch& patch, const ExtractorParams& params);

// cube position (r, c) holds the encoding of the fine patch at (r, c)
Tensor build_local_cube(const LocalPatchGrid& grid, const ExtractorParams& params);

struct ReconTerms {
  Var l1;
  Var lpips;
  Var gen_adv;
  Var disc_adv;
};

// Loss terms on an explicit (x, reconstruction) pair. disc may be null when
// the adversarial term is unused; the adversarial vars are then empty.
ReconTerms recon_terms(Graph& g, const Var& x, const Var& xhat, const PerceptualNet& phi,
                       const DiscriminatorParams* disc);

struct ReconLosses {
  double l1 = 0.0;
  double lpips_like = 0.0;
  double gen_adv = 0.0;
  double disc_adv = 0.0;
};

ReconLosses reconstruction_losses(const Tensor& x, const ExtractorParams& params,
                                  const PerceptualNet& phi, const DiscriminatorParams& disc);

struct ExtractorTrainConfig {
  int steps = 500;
  int batch = 16;
  double lr = 1e-3;
  double momentum = 0.9;
  bool adversarial = false;
  double disc_lr = 1e-4;
  uint64_t seed = 1;
};

struct ExtractorTrainResult {
  ExtractorParams params;
  PerceptualNet phi;        // the fixed net used during training
  DiscriminatorParams disc; // empty store unless adversarial was enabled
  std::vector<double> trace;  // total training loss per step, pre-update
};

ExtractorTrainResult train_extractor(const std::vector<std::vector<uint8_t>>& patches, int side,
                                     int d, const ExtractorTrainConfig& cfg);

// Per-slide feature store: one record per kept coarse patch holding its
// global d-vector and its local cube.
struct FeatureRecord {
  int patch_id = 0;
  int grid_row = 0;
  int grid_col = 0;
  Tensor global{{1}};
  Tensor cube{{1, 1, 1}};
};

struct FeatureStore {
  int d = 0;
  int cube_side = 0;
  std::vector<FeatureRecord> records;
};

std::string encode_feature_store(const FeatureStore& store);
FeatureStore decode_feature_store(const std::vector<uint8_t>& bytes, const std::string& origin);
void save_feature_store(const std::string& path, const FeatureStore& store);
FeatureStore load_feature_store(const std::string& path);

}  // namespace isg
