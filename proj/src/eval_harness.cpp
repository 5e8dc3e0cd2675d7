#include "isg/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <unordered_set>

#include "isg/autodiff.hpp"
#include "isg/optim.hpp"
#include "isg/params.hpp"
#include "isg/rng.hpp"

namespace isg {

double pcc(const std::vector<double>& pred, const std::vector<double>& gt) {
  require(pred.size() == gt.size(), Err::LengthMismatch,
          "pcc needs equal lengths, got " + std::to_string(pred.size()) + " and " +
              std::to_string(gt.size()));
  const std::size_t n = pred.size();
  require(n >= 2, Err::LengthMismatch, "pcc needs at least 2 samples");
  double mp = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    require(std::isfinite(pred[i]) && std::isfinite(gt[i]), Err::NonFiniteValue,
            "pcc input is not finite");
    mp += pred[i];
    mg += gt[i];
  }
  mp /= static_cast<double>(n);
  mg /= static_cast<double>(n);
  double cov = 0.0, vp = 0.0, vg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = pred[i] - mp;
    const double b = gt[i] - mg;
    cov += a * b;
    vp += a * a;
    vg += b * b;
  }
  require(vp > 0.0 && vg > 0.0, Err::ConstantInput, "pcc input has zero variance");
  return std::clamp(cov / std::sqrt(vp * vg), -1.0, 1.0);
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), Err::LengthMismatch,
          "auc needs one label per score");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] == 0 || labels[i] == 1, Err::InvalidConfig, "auc labels must be 0 or 1");
    require(std::isfinite(scores[i]), Err::NonFiniteValue, "auc score is not finite");
    pos += static_cast<std::size_t>(labels[i]);
  }
  require(pos > 0 && pos < n, Err::SingleClass, "auc needs both classes present");

  // midranks over the sorted scores turn each tied pair into a 1/2
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t)
      if (labels[order[t]] == 1) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double np = static_cast<double>(pos);
  const double nn = static_cast<double>(n - pos);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

GeneVector log_normalize(const std::vector<double>& raw) {
  GeneVector out;
  out.reserve(raw.size());
  for (double v : raw) {
    require(std::isfinite(v), Err::NonFiniteValue, "log_normalize input is not finite");
    require(v >= 0.0, Err::NegativeInput,
            "log_normalize input must be non-negative, got " + std::to_string(v));
    out.push_back(std::log1p(v));
  }
  return out;
}

int FoldAssignment::fold_of(const std::string& id) const {
  for (const auto& [slide, fold] : mapping)
    if (slide == id) return fold;
  fail(Err::MissingArtifact, "slide not in fold assignment: " + id);
}

FoldAssignment kfold_split(const std::vector<std::string>& slide_ids, int k, uint64_t seed) {
  require(k >= 1, Err::InvalidConfig, "kfold_split needs k >= 1");
  require(static_cast<int>(slide_ids.size()) >= k, Err::TooFewSlides,
          "kfold_split needs at least k slides, got " + std::to_string(slide_ids.size()));
  std::unordered_set<std::string> seen;
  for (const auto& id : slide_ids)
    require(seen.insert(id).second, Err::InvalidConfig, "duplicate slide id: " + id);

  std::vector<std::size_t> order(slide_ids.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }

  FoldAssignment out;
  out.k = k;
  out.seed = seed;
  std::vector<int> fold_by_index(slide_ids.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos)
    fold_by_index[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(k));
  out.mapping.reserve(slide_ids.size());
  for (std::size_t i = 0; i < slide_ids.size(); ++i)
    out.mapping.emplace_back(slide_ids[i], fold_by_index[i]);
  return out;
}

namespace {

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows,
                      const std::vector<std::size_t>& idx, int width) {
  Tensor out({static_cast<int>(idx.size()), width});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int c = 0; c < width; ++c)
      out.data[r * static_cast<std::size_t>(width) + static_cast<std::size_t>(c)] =
          rows[idx[r]][static_cast<std::size_t>(c)];
  return out;
}

Var probe_forward(Graph& g, const Var& x, const ParamStore& store) {
  auto h = relu(g, add_rowvec(g, matmul(g, x, store.get("w1")), store.get("b1")));
  return add_rowvec(g, matmul(g, h, store.get("w2")), store.get("b2"));
}

}  // namespace

ProbeResult feature_probe(const std::vector<std::vector<double>>& features,
                          const std::vector<GeneVector>& labels, const ProbeConfig& cfg) {
  require(!features.empty(), Err::EmptyDataset, "feature_probe needs at least one slide");
  require(features.size() == labels.size(), Err::LengthMismatch,
          "feature_probe needs one label per feature vector");
  const int d = static_cast<int>(features[0].size());
  const int n = static_cast<int>(labels[0].size());
  require(d >= 1 && n >= 1, Err::ShapeMismatch, "feature_probe needs nonempty vectors");
  for (const auto& f : features)
    require(static_cast<int>(f.size()) == d, Err::ShapeMismatch, "ragged feature vectors");
  for (const auto& l : labels)
    require(static_cast<int>(l.size()) == n, Err::ShapeMismatch, "ragged label vectors");
  require(cfg.folds >= 2, Err::InvalidConfig, "feature_probe needs at least 2 folds");
  require(cfg.epochs >= 0 && cfg.lr >= 0.0, Err::InvalidConfig, "bad probe training config");
  require(features.size() >= 2 * static_cast<std::size_t>(cfg.folds), Err::TooFewSlides,
          "feature_probe needs at least 2 slides per fold");

  std::vector<std::string> ids;
  ids.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) ids.push_back(std::to_string(i));
  const auto assignment = kfold_split(ids, cfg.folds, cfg.seed);

  const int h = 2 * d;
  ProbeResult result;
  result.fold_pcc.reserve(static_cast<std::size_t>(cfg.folds));

  for (int fold = 0; fold < cfg.folds; ++fold) {
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < features.size(); ++i)
      (assignment.mapping[i].second == fold ? val_idx : train_idx).push_back(i);

    ParamStore store;
    Rng rng(cfg.seed + static_cast<uint64_t>(fold));
    store.add("w1", Tensor::randn({d, h}, rng, std::sqrt(2.0 / d)));
    store.add("b1", Tensor({h}));
    store.add("w2", Tensor::randn({h, n}, rng, std::sqrt(1.0 / h)));
    store.add("b2", Tensor({n}));

    const Var x = leaf(rows_to_tensor(features, train_idx, d));
    const Var y = leaf(rows_to_tensor(labels, train_idx, n));
    SgdMomentum opt(cfg.lr, cfg.momentum);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      Graph g;
      auto loss = l2_loss(g, probe_forward(g, x, store), y);
      require(std::isfinite(loss->value.data[0]), Err::DivergedLoss,
              "probe loss became non-finite at epoch " + std::to_string(epoch));
      store.zero_grads();
      g.backward(loss);
      opt.step(store.trainable());
    }

    Graph g;
    const Var xv = leaf(rows_to_tensor(features, val_idx, d));
    const Tensor pred = probe_forward(g, xv, store)->value;
    double gene_sum = 0.0;
    for (int gene = 0; gene < n; ++gene) {
      std::vector<double> p, t;
      p.reserve(val_idx.size());
      t.reserve(val_idx.size());
      for (std::size_t r = 0; r < val_idx.size(); ++r) {
        p.push_back(pred.data[r * static_cast<std::size_t>(n) + static_cast<std::size_t>(gene)]);
        t.push_back(labels[val_idx[r]][static_cast<std::size_t>(gene)]);
      }
      try {
        gene_sum += pcc(p, t);
      } catch (const Error& e) {
        if (e.code() != Err::ConstantInput) throw;
        result.failed = true;
      }
    }
    result.fold_pcc.push_back(gene_sum / static_cast<double>(n));
  }

  double total = 0.0;
  for (double v : result.fold_pcc) total += v;
  result.mean_pcc = total / static_cast<double>(result.fold_pcc.size());
  return result;
}

std::string format_report(const std::vector<ReportRow>& rows) {
  std::string out = "task\tgene\tfold\tpcc\n";
  char buf[64];
  double total = 0.0;
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", row.pcc);
    out += row.task + "\t" + row.gene + "\t" + std::to_string(row.fold) + "\t" + buf + "\n";
    total += row.pcc;
  }
  std::snprintf(buf, sizeof(buf), "%.6f",
                rows.empty() ? 0.0 : total / static_cast<double>(rows.size()));
  out += std::string("AVG\t-\t-\t") + buf + "\n";
  return out;
}

}  // namespace isg
