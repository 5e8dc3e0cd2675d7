#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "isg/errors.hpp"

namespace isg {

// Log-normalized expression values, one entry per gene.
using GeneVector = std::vector<double>;

// Sample Pearson correlation. Both vectors need length >= 2 and nonzero
// variance; a constant input has no defined correlation.
double pcc(const std::vector<double>& pred, const std::vector<double>& gt);

// Rank-based (Mann-Whitney) AUC with ties counted 1/2. Labels are 0 or 1
// and both classes must be present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Elementwise ln(1 + x). Negative entries are rejected.
GeneVector log_normalize(const std::vector<double>& raw);

struct FoldAssignment {
  int k = 5;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, int>> mapping;  // slide order preserved

  int fold_of(const std::string& id) const;
};

// Seeded shuffle then round-robin, so fold sizes differ by at most one and
// the assignment depends only on (slide set, k, seed).
FoldAssignment kfold_split(const std::vector<std::string>& slide_ids, int k, uint64_t seed);

struct ProbeConfig {
  int folds = 5;
  int epochs = 200;
  double lr = 1e-2;
  double momentum = 0.9;
  uint64_t seed = 1;
};

struct ProbeResult {
  double mean_pcc = 0.0;         // mean over folds and genes
  bool failed = false;           // some fold produced constant predictions
  std::vector<double> fold_pcc;  // per-fold mean over genes
};

// Feature-effectiveness probe: a d -> 2d -> n perceptron with one ReLU,
// trained full-batch with L2 loss under k-fold cross-validation. Genes whose
// held-out predictions come out constant contribute 0 and set `failed`.
ProbeResult feature_probe(const std::vector<std::vector<double>>& features,
                          const std::vector<GeneVector>& labels, const ProbeConfig& cfg);

struct ReportRow {
  std::string task;
  std::string gene;
  int fold = 0;
  double pcc = 0.0;
};

// Tab-separated evaluation summary: header, one row per entry, and a final
// AVG line carrying the unweighted mean of the pcc column.
std::string format_report(const std::vector<ReportRow>& rows);

}  // namespace isg
