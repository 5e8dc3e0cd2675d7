#include "isg/pipeline.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>

#include "isg/binio.hpp"
#include "isg/checkpoint.hpp"
#include "isg/conv.hpp"
#include "isg/dual_attn.hpp"
#include "isg/errors.hpp"
#include "isg/eval_harness.hpp"
#include "isg/feat_extract.hpp"
#include "isg/grad_check.hpp"
#include "isg/rng.hpp"

namespace fs = std::filesystem;

namespace isg {

namespace {

constexpr const char* kManifestName = "run_manifest.txt";

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  require(ec == std::errc(), Err::NonFiniteValue, "unformattable double");
  return std::string(buf, p);
}

std::string slide_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "slide%03d", i);
  return buf;
}

std::string join(const std::string& dir, const std::string& name) { return dir + "/" + name; }

std::string tiles_dir(const PipelineConfig& cfg) { return join(cfg.work_dir, "tiles"); }
std::string selection_dir(const PipelineConfig& cfg) { return join(cfg.work_dir, "selection"); }
std::string extractor_dir(const PipelineConfig& cfg) { return join(cfg.work_dir, "extractor"); }
std::string features_dir(const PipelineConfig& cfg) { return join(cfg.work_dir, "features"); }
std::string predictor_dir(const PipelineConfig& cfg) { return join(cfg.work_dir, "predictor"); }
std::string report_dir(const PipelineConfig& cfg) { return join(cfg.work_dir, "report"); }

std::string file_text(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

double parse_double_field(const std::string& origin, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  require(end == v.c_str() + v.size() && !v.empty(), Err::CorruptData,
          origin + ": bad number '" + v + "'");
  return out;
}

int parse_int_field(const std::string& origin, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size(), Err::CorruptData,
          origin + ": bad integer '" + v + "'");
  return out;
}

// Checks the data directory when it was produced by the synth stage; slides
// supplied from elsewhere carry no manifest and are taken as-is.
void soft_verify_data(const PipelineConfig& cfg) {
  if (fs::exists(join(cfg.data_dir, kManifestName))) verify_stage_dir(cfg.data_dir, "synth");
}

LabelTable require_labels(const PipelineConfig& cfg) {
  const std::string path = join(cfg.data_dir, "labels.tsv");
  require(fs::exists(path), Err::MissingArtifact, path + " not found; run synth first");
  return read_labels(path);
}

// Scores every coarse patch with the configured selector and applies the
// threshold rule.
std::vector<ManifestRow> compute_selection(const std::vector<GlobalPatch>& patches,
                                           const PipelineConfig& cfg) {
  std::vector<ScoredPatch> scored;
  scored.reserve(patches.size());
  for (const auto& gp : patches) {
    const double s = cfg.method == SelectMethod::Shannon ? shannon_bits(gp, cfg.effort)
                                                         : baseline_score(gp, cfg.method);
    scored.push_back({gp.id, s});
  }
  const auto records = select_patches(scored, cfg.method, cfg.rule);
  std::vector<ManifestRow> rows;
  rows.reserve(patches.size());
  for (std::size_t j = 0; j < patches.size(); ++j)
    rows.push_back({patches[j].id, patches[j].grid_row, patches[j].grid_col, cfg.method,
                    records[j].score, records[j].kept});
  return rows;
}

// Kept rows in manifest order; a slide where the rule kept nothing falls
// back to its single best-scoring patch so downstream stages have input.
std::vector<std::size_t> kept_indices(const std::vector<ManifestRow>& rows) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < rows.size(); ++j)
    if (rows[j].kept) idx.push_back(j);
  if (idx.empty() && !rows.empty()) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < rows.size(); ++j)
      if (rows[j].score > rows[best].score) best = j;
    idx.push_back(best);
  }
  return idx;
}

void check_rows_match(const std::string& origin, const std::vector<ManifestRow>& rows,
                      const std::vector<GlobalPatch>& patches) {
  require(rows.size() == patches.size(), Err::CorruptData,
          origin + ": " + std::to_string(rows.size()) + " rows for " +
              std::to_string(patches.size()) + " patches");
  for (std::size_t j = 0; j < rows.size(); ++j)
    require(rows[j].patch_id == patches[j].id, Err::CorruptData,
            origin + ": patch id mismatch at row " + std::to_string(j));
}

FeatureStore build_store(const std::vector<GlobalPatch>& patches,
                         const std::vector<std::size_t>& idx, const PipelineConfig& cfg,
                         const ExtractorParams& p_params, const ExtractorParams& q_params) {
  FeatureStore store;
  store.d = cfg.d;
  store.cube_side = cfg.tile.p / cfg.tile.q;
  for (const std::size_t j : idx) {
    const GlobalPatch& gp = patches[j];
    FeatureRecord rec;
    rec.patch_id = gp.id;
    rec.grid_row = gp.grid_row;
    rec.grid_col = gp.grid_col;
    rec.global = encode(gp, p_params);
    rec.cube = build_local_cube(tile_fine(gp, cfg.tile), q_params);
    store.records.push_back(std::move(rec));
  }
  return store;
}

std::pair<ExtractorParams, ExtractorParams> load_extractors(const PipelineConfig& cfg) {
  verify_stage_dir(extractor_dir(cfg), "train-extractor");
  ExtractorParams p_params = make_extractor(cfg.tile.p, cfg.d, 0);
  load_checkpoint(join(extractor_dir(cfg), "p_extractor.isgw"), p_params.store);
  ExtractorParams q_params = make_extractor(cfg.tile.q, cfg.d, 0);
  load_checkpoint(join(extractor_dir(cfg), "q_extractor.isgw"), q_params.store);
  return {std::move(p_params), std::move(q_params)};
}

int predictor_genes(const PipelineConfig& cfg) {
  const RunManifest m = read_run_manifest(predictor_dir(cfg));
  for (const auto& [k, v] : m.extra)
    if (k == "genes") return parse_int_field(join(predictor_dir(cfg), kManifestName), v);
  throw Error(Err::CorruptData, join(predictor_dir(cfg), kManifestName) + ": missing genes entry");
}

PredictorParams load_predictor(const PipelineConfig& cfg, int genes) {
  verify_stage_dir(predictor_dir(cfg), "train-predictor");
  VitConfig vit = cfg.vit;
  vit.genes = genes;
  PredictorParams params =
      make_predictor(cfg.d, cfg.tile.p / cfg.tile.q, cfg.stack, vit, 0);
  load_checkpoint(join(predictor_dir(cfg), "predictor.isgw"), params.store);
  return params;
}

std::string gene_name(const LabelTable& labels, int j) {
  if (j < static_cast<int>(labels.gene_names.size())) return labels.gene_names[j];
  return "g" + std::to_string(j);
}

}  // namespace

const std::vector<double>* LabelTable::find(const std::string& slide_id) const {
  for (const auto& [id, values] : rows)
    if (id == slide_id) return &values;
  return nullptr;
}

LabelTable read_labels(const std::string& path) {
  std::stringstream ss(file_text(path));
  std::string line;
  require(static_cast<bool>(std::getline(ss, line)), Err::CorruptData, path + ": empty file");
  auto header = split_tabs(line);
  require(header.size() >= 2 && header[0] == "slide_id", Err::CorruptData,
          path + ": header must start with slide_id and name at least one gene");
  LabelTable table;
  table.gene_names.assign(header.begin() + 1, header.end());
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    require(fields.size() == header.size(), Err::CorruptData,
            path + ": row '" + fields[0] + "' has " + std::to_string(fields.size() - 1) +
                " values, expected " + std::to_string(header.size() - 1));
    require(table.find(fields[0]) == nullptr, Err::CorruptData,
            path + ": duplicate slide id " + fields[0]);
    std::vector<double> values;
    for (std::size_t j = 1; j < fields.size(); ++j)
      values.push_back(parse_double_field(path, fields[j]));
    table.rows.emplace_back(fields[0], std::move(values));
  }
  require(!table.rows.empty(), Err::CorruptData, path + ": no slide rows");
  return table;
}

std::string crc32_hex(const std::string& bytes) {
  const uLong crc =
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

void write_run_manifest(const std::string& dir, RunManifest manifest, const PipelineConfig& cfg) {
  manifest.version = kPipelineVersion;
  manifest.seed = cfg.seed;
  manifest.hash = config_hash(cfg);
  std::sort(manifest.artifacts.begin(), manifest.artifacts.end());
  std::string out;
  out += "stage=" + manifest.stage + "\n";
  out += "version=" + manifest.version + "\n";
  out += "seed=" + std::to_string(manifest.seed) + "\n";
  out += "config_hash=" + manifest.hash + "\n";
  for (const auto& [k, v] : manifest.extra) out += k + "=" + v + "\n";
  std::stringstream cfg_lines(canonical_config(cfg));
  std::string line;
  while (std::getline(cfg_lines, line)) out += "config." + line + "\n";
  for (const auto& [name, crc] : manifest.artifacts) out += "artifact." + name + "=" + crc + "\n";
  write_file_bytes(join(dir, kManifestName), out);
}

RunManifest read_run_manifest(const std::string& dir) {
  const std::string path = join(dir, kManifestName);
  require(fs::exists(path), Err::MissingArtifact, path + " not found; run the stage first");
  RunManifest m;
  std::stringstream ss(file_text(path));
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    require(eq != std::string::npos, Err::CorruptData,
            path + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "stage")
      m.stage = value;
    else if (key == "version")
      m.version = value;
    else if (key == "seed")
      m.seed = std::strtoull(value.c_str(), nullptr, 10);
    else if (key == "config_hash")
      m.hash = value;
    else if (key.rfind("config.", 0) == 0)
      continue;
    else if (key.rfind("artifact.", 0) == 0)
      m.artifacts.emplace_back(key.substr(9), value);
    else
      m.extra.emplace_back(key, value);
  }
  require(!m.stage.empty(), Err::CorruptData, path + ": missing stage entry");
  return m;
}

void verify_stage_dir(const std::string& dir, const std::string& expect_stage) {
  require(fs::exists(join(dir, kManifestName)), Err::MissingArtifact,
          "stage '" + expect_stage + "' has no manifest under " + dir + "; run it first");
  const RunManifest m = read_run_manifest(dir);
  require(m.stage == expect_stage, Err::CorruptData,
          dir + ": manifest belongs to stage '" + m.stage + "', expected '" + expect_stage + "'");
  for (const auto& [name, crc] : m.artifacts) {
    const std::string path = join(dir, name);
    require(fs::exists(path), Err::MissingArtifact, path + " listed in manifest but missing");
    const std::string got = crc32_hex(file_text(path));
    require(got == crc, Err::ChecksumMismatch,
            path + ": crc32 " + got + " does not match manifest " + crc);
  }
}

void run_synth(const PipelineConfig& cfg, std::ostream& out) {
  fs::create_directories(cfg.data_dir);
  RunManifest manifest;
  manifest.stage = "synth";
  std::string labels = "slide_id";
  for (int j = 0; j < cfg.synth.genes; ++j) labels += "\tg" + std::to_string(j);
  labels += '\n';
  const uint64_t base = derive_seed(cfg.seed, "slide");
  for (int i = 0; i < cfg.synth_slides; ++i) {
    const SynthSlide slide = generate_slide(base + static_cast<uint64_t>(i), cfg.synth);
    const std::string name = slide_name(i) + std::string(".isgr");
    const std::string bytes = encode_isgr(slide.image);
    write_file_bytes(join(cfg.data_dir, name), bytes);
    manifest.artifacts.emplace_back(name, crc32_hex(bytes));
    labels += slide_name(i);
    for (const double v : slide.label) labels += '\t' + fmt_double(v);
    labels += '\n';
  }
  write_file_bytes(join(cfg.data_dir, "labels.tsv"), labels);
  manifest.artifacts.emplace_back("labels.tsv", crc32_hex(labels));
  write_run_manifest(cfg.data_dir, std::move(manifest), cfg);
  out << "synth: wrote " << cfg.synth_slides << " slides (" << cfg.synth.side << "x"
      << cfg.synth.side << ", " << cfg.synth.genes << " genes) to " << cfg.data_dir << "\n";
}

void run_tile(const PipelineConfig& cfg, std::ostream& out) {
  soft_verify_data(cfg);
  const LabelTable labels = require_labels(cfg);
  fs::create_directories(tiles_dir(cfg));
  RunManifest manifest;
  manifest.stage = "tile";
  std::size_t total = 0;
  for (const auto& [id, values] : labels.rows) {
    const RasterImage img = load_raster(join(cfg.data_dir, id + ".isgr"));
    const auto patches = tile_coarse(img, cfg.tile);
    std::string text = "patch_id\tgrid_row\tgrid_col\tside\n";
    for (const auto& gp : patches)
      text += std::to_string(gp.id) + '\t' + std::to_string(gp.grid_row) + '\t' +
              std::to_string(gp.grid_col) + '\t' + std::to_string(gp.side) + '\n';
    const std::string name = id + ".tsv";
    write_file_bytes(join(tiles_dir(cfg), name), text);
    manifest.artifacts.emplace_back(name, crc32_hex(text));
    total += patches.size();
  }
  write_run_manifest(tiles_dir(cfg), std::move(manifest), cfg);
  out << "tile: " << labels.rows.size() << " slides, " << total << " coarse patches at p="
      << cfg.tile.p << "\n";
}

void run_select(const PipelineConfig& cfg, std::ostream& out) {
  soft_verify_data(cfg);
  verify_stage_dir(tiles_dir(cfg), "tile");
  const LabelTable labels = require_labels(cfg);
  fs::create_directories(selection_dir(cfg));
  RunManifest manifest;
  manifest.stage = "select";
  std::size_t kept_total = 0, patch_total = 0;
  std::size_t kept_min = SIZE_MAX, kept_max = 0;
  for (const auto& [id, values] : labels.rows) {
    const RasterImage img = load_raster(join(cfg.data_dir, id + ".isgr"));
    const auto patches = tile_coarse(img, cfg.tile);
    const std::string tiles_path = join(tiles_dir(cfg), id + ".tsv");
    std::stringstream ts(file_text(tiles_path));
    std::string line;
    std::getline(ts, line);
    std::size_t tile_rows = 0;
    while (std::getline(ts, line))
      if (!line.empty()) {
        const auto fields = split_tabs(line);
        require(fields.size() == 4, Err::CorruptData, tiles_path + ": expected 4 columns");
        require(parse_int_field(tiles_path, fields[0]) == patches[tile_rows].id, Err::CorruptData,
                tiles_path + ": patch id mismatch at row " + std::to_string(tile_rows));
        ++tile_rows;
      }
    require(tile_rows == patches.size(), Err::CorruptData,
            tiles_path + ": row count does not match the tiling");
    const auto rows = compute_selection(patches, cfg);
    const std::string name = id + ".tsv";
    write_selection_manifest(join(selection_dir(cfg), name), rows);
    manifest.artifacts.emplace_back(name, crc32_hex(file_text(join(selection_dir(cfg), name))));
    std::size_t kept = 0;
    for (const auto& r : rows) kept += r.kept ? 1 : 0;
    kept_total += kept;
    patch_total += rows.size();
    kept_min = std::min(kept_min, kept);
    kept_max = std::max(kept_max, kept);
  }
  write_run_manifest(selection_dir(cfg), std::move(manifest), cfg);
  out << "select: kept " << kept_total << "/" << patch_total << " patches ("
      << select_method_name(cfg.method) << ", per slide min " << kept_min << ", max " << kept_max
      << ")\n";
}

void run_train_extractor(const PipelineConfig& cfg, std::ostream& out) {
  soft_verify_data(cfg);
  verify_stage_dir(selection_dir(cfg), "select");
  const LabelTable labels = require_labels(cfg);
  const int n = static_cast<int>(labels.rows.size());
  require(n > cfg.val_slides, Err::InvalidConfig,
          "predictor.val_slides: only " + std::to_string(n) + " slides in labels.tsv");
  const int n_train = n - cfg.val_slides;

  std::vector<std::vector<uint8_t>> coarse_bufs, fine_bufs;
  for (int i = 0; i < n_train; ++i) {
    const std::string& id = labels.rows[static_cast<std::size_t>(i)].first;
    const RasterImage img = load_raster(join(cfg.data_dir, id + ".isgr"));
    const auto patches = tile_coarse(img, cfg.tile);
    const auto rows = read_selection_manifest(join(selection_dir(cfg), id + ".tsv"));
    check_rows_match(join(selection_dir(cfg), id + ".tsv"), rows, patches);
    for (const std::size_t j : kept_indices(rows)) {
      coarse_bufs.push_back(patches[j].pixels);
      const auto grid = tile_fine(patches[j], cfg.tile);
      for (const auto& f : grid.patches) fine_bufs.push_back(f);
    }
  }
  out << "train-extractor: corpus " << coarse_bufs.size() << " coarse / " << fine_bufs.size()
      << " fine patches from " << n_train << " training slides\n";

  ExtractorTrainConfig pcfg = cfg.extractor;
  pcfg.seed = derive_seed(cfg.seed, "p-extractor");
  const auto p_res = train_extractor(coarse_bufs, cfg.tile.p, cfg.d, pcfg);
  out << "train-extractor: p loss " << fmt_double(p_res.trace.front()) << " -> "
      << fmt_double(p_res.trace.back()) << "\n";

  ExtractorTrainConfig qcfg = cfg.extractor;
  qcfg.seed = derive_seed(cfg.seed, "q-extractor");
  const auto q_res = train_extractor(fine_bufs, cfg.tile.q, cfg.d, qcfg);
  out << "train-extractor: q loss " << fmt_double(q_res.trace.front()) << " -> "
      << fmt_double(q_res.trace.back()) << "\n";

  fs::create_directories(extractor_dir(cfg));
  RunManifest manifest;
  manifest.stage = "train-extractor";
  auto save_side = [&](const std::string& stem, const ExtractorTrainResult& res) {
    const std::string ck = stem + "_extractor.isgw";
    save_checkpoint(join(extractor_dir(cfg), ck), res.params.store);
    manifest.artifacts.emplace_back(ck, crc32_hex(file_text(join(extractor_dir(cfg), ck))));
    std::string trace = "step\tloss\n";
    for (std::size_t s = 0; s < res.trace.size(); ++s)
      trace += std::to_string(s) + '\t' + fmt_double(res.trace[s]) + '\n';
    const std::string tr = stem + "_trace.tsv";
    write_file_bytes(join(extractor_dir(cfg), tr), trace);
    manifest.artifacts.emplace_back(tr, crc32_hex(trace));
  };
  save_side("p", p_res);
  save_side("q", q_res);
  write_run_manifest(extractor_dir(cfg), std::move(manifest), cfg);
}

void run_extract(const PipelineConfig& cfg, std::ostream& out) {
  soft_verify_data(cfg);
  verify_stage_dir(selection_dir(cfg), "select");
  const LabelTable labels = require_labels(cfg);
  const auto [p_params, q_params] = load_extractors(cfg);
  fs::create_directories(features_dir(cfg));
  RunManifest manifest;
  manifest.stage = "extract";
  std::size_t records = 0, fallbacks = 0;
  for (const auto& [id, values] : labels.rows) {
    const RasterImage img = load_raster(join(cfg.data_dir, id + ".isgr"));
    const auto patches = tile_coarse(img, cfg.tile);
    const auto rows = read_selection_manifest(join(selection_dir(cfg), id + ".tsv"));
    check_rows_match(join(selection_dir(cfg), id + ".tsv"), rows, patches);
    const auto idx = kept_indices(rows);
    if (std::none_of(rows.begin(), rows.end(), [](const ManifestRow& r) { return r.kept; }))
      ++fallbacks;
    const FeatureStore store = build_store(patches, idx, cfg, p_params, q_params);
    const std::string bytes = encode_feature_store(store);
    const std::string name = id + ".isgf";
    write_file_bytes(join(features_dir(cfg), name), bytes);
    manifest.artifacts.emplace_back(name, crc32_hex(bytes));
    records += store.records.size();
  }
  write_run_manifest(features_dir(cfg), std::move(manifest), cfg);
  out << "extract: " << records << " feature records across " << labels.rows.size() << " slides";
  if (fallbacks) out << " (" << fallbacks << " slides fell back to their best patch)";
  out << "\n";
}

void run_train_predictor(const PipelineConfig& cfg, std::ostream& out) {
  const LabelTable labels = require_labels(cfg);
  verify_stage_dir(features_dir(cfg), "extract");
  const int n = static_cast<int>(labels.rows.size());
  require(n > cfg.val_slides, Err::InvalidConfig,
          "predictor.val_slides: only " + std::to_string(n) + " slides in labels.tsv");
  const int n_train = n - cfg.val_slides;
  const int genes = static_cast<int>(labels.gene_names.size());

  std::vector<LabeledSlide> train, val;
  for (int i = 0; i < n; ++i) {
    const auto& [id, values] = labels.rows[static_cast<std::size_t>(i)];
    LabeledSlide ls;
    ls.slide_id = id;
    ls.label = values;
    ls.features = load_feature_store(join(features_dir(cfg), id + ".isgf"));
    (i < n_train ? train : val).push_back(std::move(ls));
  }

  VitConfig vit = cfg.vit;
  vit.genes = genes;
  PredictorTrainConfig tcfg = cfg.predictor;
  tcfg.seed = derive_seed(cfg.seed, "predictor");
  const auto res = train_predictor(train, val, cfg.stack, vit, tcfg);

  fs::create_directories(predictor_dir(cfg));
  RunManifest manifest;
  manifest.stage = "train-predictor";
  manifest.extra.emplace_back("genes", std::to_string(genes));
  save_checkpoint(join(predictor_dir(cfg), "predictor.isgw"), res.params.store);
  manifest.artifacts.emplace_back("predictor.isgw",
                                  crc32_hex(file_text(join(predictor_dir(cfg), "predictor.isgw"))));
  std::string trace = "epoch\ttrain_loss\tval_pcc\n";
  for (std::size_t e = 0; e < res.train_loss.size(); ++e) {
    trace += std::to_string(e) + '\t' + fmt_double(res.train_loss[e]) + '\t';
    trace += e < res.val_pcc.size() ? fmt_double(res.val_pcc[e]) : std::string("-");
    trace += '\n';
  }
  write_file_bytes(join(predictor_dir(cfg), "trace.tsv"), trace);
  manifest.artifacts.emplace_back("trace.tsv", crc32_hex(trace));
  write_run_manifest(predictor_dir(cfg), std::move(manifest), cfg);

  out << "train-predictor: " << n_train << " train / " << cfg.val_slides << " val slides, "
      << genes << " genes";
  if (!res.train_loss.empty()) out << ", final loss " << fmt_double(res.train_loss.back());
  if (!res.val_pcc.empty()) out << ", final val pcc " << fmt_double(res.val_pcc.back());
  out << "\n";
}

void run_predict(const PipelineConfig& cfg, const std::string& slide_path, std::ostream& out) {
  const auto [p_params, q_params] = load_extractors(cfg);
  const int genes = predictor_genes(cfg);
  const PredictorParams params = load_predictor(cfg, genes);

  const RasterImage img = load_raster(slide_path);
  const auto patches = tile_coarse(img, cfg.tile);
  const auto rows = compute_selection(patches, cfg);
  const FeatureStore store = build_store(patches, kept_indices(rows), cfg, p_params, q_params);
  const GeneVector preds = predict_genes(store, params, derive_seed(cfg.seed, "predict-subsample"));

  const std::string slide_id = fs::path(slide_path).stem().string();
  LabelTable labels;
  const std::vector<double>* gt = nullptr;
  if (fs::exists(join(cfg.data_dir, "labels.tsv"))) {
    labels = read_labels(join(cfg.data_dir, "labels.tsv"));
    gt = labels.find(slide_id);
    require(gt == nullptr || static_cast<int>(gt->size()) == genes, Err::CorruptData,
            "labels.tsv gene count does not match the trained predictor");
  }
  for (int j = 0; j < genes; ++j) {
    out << slide_id << '\t' << gene_name(labels, j) << '\t' << fmt_double(preds[j]) << '\t'
        << (gt ? fmt_double((*gt)[static_cast<std::size_t>(j)]) : std::string("-")) << '\n';
  }
}

void run_evaluate(const PipelineConfig& cfg, std::ostream& out) {
  const LabelTable labels = require_labels(cfg);
  verify_stage_dir(features_dir(cfg), "extract");
  const int n = static_cast<int>(labels.rows.size());
  require(n > cfg.val_slides, Err::InvalidConfig,
          "predictor.val_slides: only " + std::to_string(n) + " slides in labels.tsv");
  const int genes = predictor_genes(cfg);
  require(genes == static_cast<int>(labels.gene_names.size()), Err::CorruptData,
          "labels.tsv names " + std::to_string(labels.gene_names.size()) +
              " genes but the predictor was trained for " + std::to_string(genes));
  const PredictorParams params = load_predictor(cfg, genes);

  std::vector<FeatureStore> stores;
  stores.reserve(static_cast<std::size_t>(n));
  for (const auto& [id, values] : labels.rows)
    stores.push_back(load_feature_store(join(features_dir(cfg), id + ".isgf")));

  // held-out per-gene correlation on the validation tail
  const int n_train = n - cfg.val_slides;
  const uint64_t eval_seed = derive_seed(cfg.seed, "eval-subsample");
  std::vector<GeneVector> preds;
  for (int i = n_train; i < n; ++i)
    preds.push_back(predict_genes(stores[static_cast<std::size_t>(i)], params, eval_seed));
  std::vector<ReportRow> rows;
  for (int j = 0; j < genes; ++j) {
    std::vector<double> p, t;
    for (int i = n_train; i < n; ++i) {
      p.push_back(preds[static_cast<std::size_t>(i - n_train)][static_cast<std::size_t>(j)]);
      t.push_back(labels.rows[static_cast<std::size_t>(i)].second[static_cast<std::size_t>(j)]);
    }
    double r = 0.0;
    try {
      r = pcc(p, t);
    } catch (const Error& e) {
      // a constant prediction or target carries no signal, score it 0
      if (e.code() != Err::ConstantInput) throw;
    }
    rows.push_back({"predictor", gene_name(labels, j), 0, r});
  }
  const std::string report = format_report(rows);

  // linear probe over the slide-mean global features, k-fold over all slides
  std::vector<std::vector<double>> feats;
  std::vector<GeneVector> gts;
  for (int i = 0; i < n; ++i) {
    const FeatureStore& st = stores[static_cast<std::size_t>(i)];
    require(!st.records.empty(), Err::NoRecords,
            labels.rows[static_cast<std::size_t>(i)].first + ": empty feature store");
    std::vector<double> mean(static_cast<std::size_t>(st.d), 0.0);
    for (const auto& rec : st.records)
      for (int c = 0; c < st.d; ++c)
        mean[static_cast<std::size_t>(c)] += rec.global.data[static_cast<std::size_t>(c)];
    for (double& v : mean) v /= static_cast<double>(st.records.size());
    feats.push_back(std::move(mean));
    gts.push_back(labels.rows[static_cast<std::size_t>(i)].second);
  }
  ProbeConfig pcfg;
  pcfg.folds = cfg.eval_folds;
  pcfg.seed = derive_seed(cfg.seed, "probe");
  const ProbeResult probe = feature_probe(feats, gts, pcfg);
  std::vector<ReportRow> probe_rows;
  for (std::size_t f = 0; f < probe.fold_pcc.size(); ++f)
    probe_rows.push_back({"probe", "-", static_cast<int>(f), probe.fold_pcc[f]});
  const std::string probe_report = format_report(probe_rows);

  fs::create_directories(report_dir(cfg));
  RunManifest manifest;
  manifest.stage = "evaluate";
  write_file_bytes(join(report_dir(cfg), "report.tsv"), report);
  manifest.artifacts.emplace_back("report.tsv", crc32_hex(report));
  write_file_bytes(join(report_dir(cfg), "probe.tsv"), probe_report);
  manifest.artifacts.emplace_back("probe.tsv", crc32_hex(probe_report));
  write_run_manifest(report_dir(cfg), std::move(manifest), cfg);

  out << "evaluate: held-out predictor report (" << cfg.val_slides << " slides)\n"
      << report << "evaluate: feature probe over " << n << " slides, " << cfg.eval_folds
      << " folds\n"
      << probe_report;
}

namespace {

Tensor randt(Rng& rng, std::vector<int> shape, double sigma = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, sigma);
  return t;
}

// keeps relu and |.| inputs a safe distance from their kinks
Tensor randt_off_kink(Rng& rng, std::vector<int> shape) {
  Tensor t = randt(rng, std::move(shape));
  for (auto& v : t.data) v += v >= 0.0 ? 0.2 : -0.2;
  return t;
}

// scalar readout with fixed random weights so every output element gets a
// distinct incoming gradient
Var weighted_sum(Graph& g, const Var& v, const Tensor& w) {
  return sum_all(g, hadamard(g, v, leaf(w)));
}

struct OpCheck {
  const char* name;
  double tol;
  std::function<double(uint64_t)> run;
};

std::vector<OpCheck> gradcheck_suite() {
  std::vector<OpCheck> checks;
  auto add_check = [&](const char* name, double tol, std::function<double(uint64_t)> fn) {
    checks.push_back({name, tol, std::move(fn)});
  };

  add_check("add", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {3, 4}), true), b = leaf(randt(rng, {3, 4}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, add(g, a, b), w); }, std::vector<Var>{a, b});
  });
  add_check("sub", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {3, 4}), true), b = leaf(randt(rng, {3, 4}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, sub(g, a, b), w); }, std::vector<Var>{a, b});
  });
  add_check("scale", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {3, 4}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, scale(g, a, -1.7), w); }, std::vector<Var>{a});
  });
  add_check("hadamard", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {3, 4}), true), b = leaf(randt(rng, {3, 4}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, hadamard(g, a, b), w); }, std::vector<Var>{a, b});
  });
  add_check("hadamard_broadcast", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {2, 3, 1}), true), b = leaf(randt(rng, {2, 3, 4}), true);
    Tensor w = randt(rng, {2, 3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, hadamard_broadcast(g, a, b), w); },
                      std::vector<Var>{a, b});
  });
  add_check("sigmoid", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 3}), true);
    Tensor w = randt(rng, {3, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, sigmoid(g, x), w); }, std::vector<Var>{x});
  });
  add_check("relu", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt_off_kink(rng, {3, 3}), true);
    Tensor w = randt(rng, {3, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, relu(g, x), w); }, std::vector<Var>{x});
  });
  add_check("softplus", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 3}), true);
    Tensor w = randt(rng, {3, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, softplus(g, x), w); }, std::vector<Var>{x});
  });
  add_check("gelu", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 3}), true);
    Tensor w = randt(rng, {3, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, gelu(g, x), w); }, std::vector<Var>{x});
  });
  add_check("matmul", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {2, 3}), true), b = leaf(randt(rng, {3, 4}), true);
    Tensor w = randt(rng, {2, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, matmul(g, a, b), w); }, std::vector<Var>{a, b});
  });
  add_check("transpose", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 2}), true);
    Tensor w = randt(rng, {2, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, transpose(g, x), w); }, std::vector<Var>{x});
  });
  add_check("reshape", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {2, 6}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, reshape(g, x, {3, 4}), w); }, std::vector<Var>{x});
  });
  add_check("slice_cols", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 5}), true);
    Tensor w = randt(rng, {3, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, slice_cols(g, x, 1, 3), w); }, std::vector<Var>{x});
  });
  add_check("concat_cols", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {3, 2}), true), b = leaf(randt(rng, {3, 3}), true);
    Tensor w = randt(rng, {3, 5});
    return grad_check([&](Graph& g) { return weighted_sum(g, concat_cols(g, {a, b}), w); },
                      std::vector<Var>{a, b});
  });
  add_check("stack_rows", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {1, 4}), true), b = leaf(randt(rng, {1, 4}), true),
         c = leaf(randt(rng, {1, 4}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, stack_rows(g, {a, b, c}), w); },
                      std::vector<Var>{a, b, c});
  });
  add_check("add_rowvec", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 4}), true), b = leaf(randt(rng, {1, 4}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, add_rowvec(g, x, b), w); }, std::vector<Var>{x, b});
  });
  add_check("softmax_spatial", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {2, 2, 1}), true);
    Tensor w = randt(rng, {2, 2, 1});
    return grad_check([&](Graph& g) { return weighted_sum(g, softmax_spatial(g, x), w); }, std::vector<Var>{x});
  });
  add_check("softmax_rows", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 4}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, softmax_rows(g, x), w); }, std::vector<Var>{x});
  });
  add_check("layer_norm", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 4}), true);
    auto gamma = leaf(randt(rng, {1, 4}), true), beta = leaf(randt(rng, {1, 4}), true);
    Tensor w = randt(rng, {3, 4});
    return grad_check([&](Graph& g) { return weighted_sum(g, layer_norm(g, x, gamma, beta), w); },
                      std::vector<Var>{x, gamma, beta});
  });
  add_check("mean_pool_spatial", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {2, 2, 3}), true);
    Tensor w = randt(rng, {3});
    return grad_check([&](Graph& g) { return weighted_sum(g, mean_pool_spatial(g, x), w); }, std::vector<Var>{x});
  });
  add_check("sum_spatial", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {2, 2, 3}), true);
    Tensor w = randt(rng, {3});
    return grad_check([&](Graph& g) { return weighted_sum(g, sum_spatial(g, x), w); }, std::vector<Var>{x});
  });
  add_check("mean_rows", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 4}), true);
    Tensor w = randt(rng, {4});
    return grad_check([&](Graph& g) { return weighted_sum(g, mean_rows(g, x), w); }, std::vector<Var>{x});
  });
  add_check("sum_all", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {3, 4}), true);
    return grad_check([&](Graph& g) { return sum_all(g, x); }, std::vector<Var>{x});
  });
  add_check("l1_loss", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {3, 4}), true);
    Tensor bt = a->value;
    for (auto& v : bt.data) v += rng.uniform() < 0.5 ? -0.5 : 0.5;
    auto b = leaf(bt, true);
    return grad_check([&](Graph& g) { return l1_loss(g, a, b); }, std::vector<Var>{a, b});
  });
  add_check("l2_loss", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {3, 4}), true), b = leaf(randt(rng, {3, 4}), true);
    return grad_check([&](Graph& g) { return l2_loss(g, a, b); }, std::vector<Var>{a, b});
  });
  add_check("l2_distance", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto a = leaf(randt(rng, {3, 4}), true), b = leaf(randt(rng, {3, 4}), true);
    return grad_check([&](Graph& g) { return l2_distance(g, a, b); }, std::vector<Var>{a, b});
  });
  add_check("conv2d", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {4, 4, 2}), true);
    auto w = leaf(randt(rng, {3, 3, 2, 3}), true), b = leaf(randt(rng, {3}), true);
    Tensor rw = randt(rng, {4, 4, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, conv2d(g, x, w, b, 1, 1), rw); },
                      std::vector<Var>{x, w, b});
  });
  add_check("conv2d stride 2", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {4, 4, 2}), true);
    auto w = leaf(randt(rng, {3, 3, 2, 3}), true), b = leaf(randt(rng, {3}), true);
    Tensor rw = randt(rng, {2, 2, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, conv2d(g, x, w, b, 2, 1), rw); },
                      std::vector<Var>{x, w, b});
  });
  add_check("conv2d_depthwise", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {4, 4, 3}), true);
    auto w = leaf(randt(rng, {3, 3, 3}), true), b = leaf(randt(rng, {3}), true);
    Tensor rw = randt(rng, {4, 4, 3});
    return grad_check(
        [&](Graph& g) { return weighted_sum(g, conv2d_depthwise(g, x, w, b, 1, 1), rw); },
        std::vector<Var>{x, w, b});
  });
  add_check("upsample_nearest2", 1e-5, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {2, 2, 3}), true);
    Tensor w = randt(rng, {4, 4, 3});
    return grad_check([&](Graph& g) { return weighted_sum(g, upsample_nearest2(g, x), w); }, std::vector<Var>{x});
  });
  add_check("composite mlp", 1e-4, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {2, 5}, 0.5), true);
    auto w1 = leaf(randt(rng, {5, 6}, 0.5), true), b1 = leaf(randt(rng, {1, 6}, 0.1), true);
    auto gam = leaf(randt(rng, {1, 6}, 0.2), true), bet = leaf(randt(rng, {1, 6}, 0.1), true);
    auto w2 = leaf(randt(rng, {6, 3}, 0.5), true);
    Tensor target = randt(rng, {2, 3});
    return grad_check(
        [&](Graph& g) {
          auto h = gelu(g, add_rowvec(g, matmul(g, x, w1), b1));
          auto y = matmul(g, layer_norm(g, h, gam, bet), w2);
          return l2_loss(g, y, leaf(target));
        },
        std::vector<Var>{x, w1, b1, gam, bet, w2});
  });
  add_check("composite conv autoencoder", 1e-4, [](uint64_t seed) {
    Rng rng(seed);
    auto x = leaf(randt(rng, {4, 4, 2}, 0.5), true);
    auto w1 = leaf(randt(rng, {3, 3, 2, 4}, 0.4), true), b1 = leaf(randt(rng, {4}, 0.1), true);
    auto w2 = leaf(randt(rng, {1, 1, 4, 2}, 0.4), true), b2 = leaf(randt(rng, {2}, 0.1), true);
    return grad_check(
        [&](Graph& g) {
          auto h = gelu(g, conv2d(g, x, w1, b1, 2, 1));
          auto y = conv2d(g, upsample_nearest2(g, h), w2, b2, 1, 0);
          return l2_loss(g, y, x);
        },
        std::vector<Var>{x, w1, b1, w2, b2});
  });
  return checks;
}

}  // namespace

int run_gradcheck(std::ostream& out) {
  const auto checks = gradcheck_suite();
  int failures = 0;
  for (const auto& check : checks) {
    double worst = 0.0;
    for (uint64_t seed = 1; seed <= 3; ++seed) worst = std::max(worst, check.run(seed));
    const bool ok = worst <= check.tol;
    char line[128];
    std::snprintf(line, sizeof(line), "gradcheck %-26s worst %.3e tol %.0e %s\n", check.name,
                  worst, check.tol, ok ? "PASS" : "FAIL");
    out << line;
    if (!ok) ++failures;
  }
  out << "gradcheck: " << (checks.size() - static_cast<std::size_t>(failures)) << "/"
      << checks.size() << " ops within tolerance\n";
  return failures;
}

}  // namespace isg
