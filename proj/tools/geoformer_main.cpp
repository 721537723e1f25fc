#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "geoformer/ccap.hpp"
#include "geoformer/dataset.hpp"
#include "geoformer/errors.hpp"
#include "geoformer/evaluation.hpp"
#include "geoformer/geosplit.hpp"
#include "geoformer/grid_labeling.hpp"
#include "geoformer/model.hpp"
#include "geoformer/trainer.hpp"

namespace fs = std::filesystem;
using namespace geoformer;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

void write_runconfig(const std::string& out_dir, const json& resolved) {
  fs::create_directories(out_dir);
  json j = resolved;
  j["tool_version"] = kVersion;
  std::ofstream out(fs::path(out_dir) / "runconfig.json", std::ios::trunc);
  if (!out) throw data_error("cannot write runconfig.json");
  out << j.dump(2) << "\n";
}

std::vector<float> read_raw_f32(const std::string& path, size_t expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open raster " + path);
  std::vector<float> v(expect);
  in.read(reinterpret_cast<char*>(v.data()), (std::streamsize)(expect * sizeof(float)));
  if ((size_t)in.gcount() != expect * sizeof(float))
    throw data_error("raster " + path + " is truncated");
  return v;
}

std::vector<double> read_raw_f64_from_f32(const std::string& path, size_t expect) {
  const std::vector<float> v = read_raw_f32(path, expect);
  return std::vector<double>(v.begin(), v.end());
}

std::array<double, 3> parse_ratios(const std::string& s) {
  std::array<double, 3> r{};
  if (std::sscanf(s.c_str(), "%lf:%lf:%lf", &r[0], &r[1], &r[2]) != 3)
    throw usage_error("ratios must look like 8:1:1");
  return r;
}

void apply_manifest(data::Container& container, const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw data_error("cannot open split manifest " + manifest_path);
  std::map<std::tuple<std::string, size_t, size_t>, data::Split> tags;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    char city[256];
    size_t row, col;
    int sector;
    char split[32];
    if (std::sscanf(line.c_str(), "%255[^,],%zu,%zu,%d,%31s", city, &row, &col, &sector,
                    split) != 5)
      throw data_error("malformed split manifest line: " + line);
    tags[{city, row, col}] = data::split_from_name(split);
  }
  for (data::Sample& s : container.samples) {
    auto it = tags.find({s.city, s.row, s.col});
    if (it == tags.end())
      throw data_error("split manifest is missing sample " + s.city + ":" +
                       std::to_string(s.row) + "," + std::to_string(s.col));
    s.split = it->second;
  }
}

data::NormStats stats_from_json(const json& j) {
  data::NormStats st;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto stdev = j.at("stdev").get<std::vector<double>>();
  std::copy(mean.begin(), mean.end(), st.mean.begin());
  std::copy(stdev.begin(), stdev.end(), st.stdev.begin());
  return st;
}

train::ChannelMask mask_from_json(const json& j) {
  train::ChannelMask m = train::kAllChannels;
  const auto v = j.get<std::vector<bool>>();
  std::copy(v.begin(), v.end(), m.begin());
  return m;
}

struct CommonModelFlags {
  size_t k = 5;
  std::string variant = "geoformer";
  size_t embed_dim = 32;
  size_t n_heads = 4;
  size_t n_blocks = 2;

  model::ModelConfig resolve() const {
    model::ModelConfig m;
    m.k = k;
    m.variant = model::variant_from_name(variant);
    m.embed_dim = embed_dim;
    m.n_heads = n_heads;
    m.n_blocks = n_blocks;
    m.window = model::ModelConfig::default_window(k);
    if (m.variant == model::Variant::cnn_baseline) m.k = 1;
    m.validate();
    return m;
  }
};

struct CommonTrainFlags {
  double lr0 = 1e-4;
  double weight_decay = 1e-2;
  size_t batch = 64;
  size_t max_epochs = 150;
  size_t warmup_epochs = 5;
  size_t patience = 10;

  train::TrainConfig resolve(uint64_t seed) const {
    train::TrainConfig t;
    t.lr0 = lr0;
    t.weight_decay = weight_decay;
    t.batch = batch;
    t.max_epochs = max_epochs;
    t.warmup_epochs = warmup_epochs;
    t.patience = patience;
    t.seed = seed;
    t.validate();
    return t;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"Building height and footprint regression pipeline"};
  app.require_subcommand(1);
  uint64_t seed = 0;
  int threads = 0;
  app.add_option("--seed", seed, "master seed; all randomness derives from it");
  app.add_option("--threads", threads, "cap on worker threads (0 = all cores)");

  // ----- ingest -----
  auto* c_ingest = app.add_subcommand("ingest", "footprints + rasters -> container");
  std::string in_footprints, in_channel_dir, in_city = "city";
  double in_ox = 0, in_oy = 0;
  size_t in_rows = 0, in_cols = 0;
  int in_year = 0;
  std::string out_dir;
  c_ingest->add_option("--footprints", in_footprints, "NDJSON footprint file")->required();
  c_ingest->add_option("--channel-dir", in_channel_dir,
                       "directory with VV.bin .. DEM.bin float32 rasters")->required();
  c_ingest->add_option("--city", in_city, "city id");
  c_ingest->add_option("--year", in_year, "acquisition year");
  c_ingest->add_option("--origin-x", in_ox)->required();
  c_ingest->add_option("--origin-y", in_oy)->required();
  c_ingest->add_option("--rows", in_rows)->required();
  c_ingest->add_option("--cols", in_cols)->required();
  c_ingest->add_option("--out", out_dir, "output container directory")->required();

  // ----- synth -----
  auto* c_synth = app.add_subcommand("synth", "seeded synthetic cities -> container");
  size_t sy_cities = 3, sy_rows = 52, sy_cols = 52;
  c_synth->add_option("--cities", sy_cities);
  c_synth->add_option("--rows", sy_rows);
  c_synth->add_option("--cols", sy_cols);
  c_synth->add_option("--out", out_dir)->required();

  // ----- split -----
  auto* c_split = app.add_subcommand("split", "container -> split manifest");
  std::string container_path, manifest_path, ratios_s = "8:1:1";
  size_t sp_k = 5;
  c_split->add_option("--container", container_path)->required();
  c_split->add_option("--k", sp_k, "context size used for boundary purging");
  c_split->add_option("--ratios", ratios_s, "train:val:test");
  c_split->add_option("--out", out_dir)->required();

  // ----- train -----
  auto* c_train = app.add_subcommand("train", "container + manifest -> checkpoints");
  CommonModelFlags mf;
  CommonTrainFlags tf;
  std::string ablation = "full", resume_path;
  c_train->add_option("--container", container_path)->required();
  c_train->add_option("--manifest", manifest_path)->required();
  c_train->add_option("--out", out_dir)->required();
  c_train->add_option("--variant", mf.variant, "geoformer or cnn_baseline");
  c_train->add_option("--k", mf.k);
  c_train->add_option("--embed-dim", mf.embed_dim);
  c_train->add_option("--heads", mf.n_heads);
  c_train->add_option("--blocks", mf.n_blocks);
  c_train->add_option("--ablation", ablation, "full|enlarged|no_dem|no_sar|no_optical");
  c_train->add_option("--lr", tf.lr0);
  c_train->add_option("--weight-decay", tf.weight_decay);
  c_train->add_option("--batch", tf.batch);
  c_train->add_option("--epochs", tf.max_epochs);
  c_train->add_option("--warmup", tf.warmup_epochs);
  c_train->add_option("--patience", tf.patience);
  c_train->add_option("--resume", resume_path, "continue from a last.ckpt");

  // ----- eval -----
  auto* c_eval = app.add_subcommand("eval", "checkpoint + container -> metric reports");
  std::string ckpt_path, eval_split = "test";
  size_t eval_k = 0;
  c_eval->add_option("--checkpoint", ckpt_path)->required();
  c_eval->add_option("--container", container_path)->required();
  c_eval->add_option("--manifest", manifest_path)->required();
  c_eval->add_option("--split", eval_split, "train|val|test");
  c_eval->add_option("--k", eval_k, "expected context size (must match checkpoint)");
  c_eval->add_option("--out", out_dir)->required();

  // ----- ablate -----
  auto* c_ablate = app.add_subcommand("ablate", "run the five standard ablations");
  c_ablate->add_option("--container", container_path)->required();
  c_ablate->add_option("--manifest", manifest_path)->required();
  c_ablate->add_option("--out", out_dir)->required();
  c_ablate->add_option("--k", mf.k);
  c_ablate->add_option("--embed-dim", mf.embed_dim);
  c_ablate->add_option("--heads", mf.n_heads);
  c_ablate->add_option("--blocks", mf.n_blocks);
  c_ablate->add_option("--lr", tf.lr0);
  c_ablate->add_option("--batch", tf.batch);
  c_ablate->add_option("--epochs", tf.max_epochs);
  c_ablate->add_option("--warmup", tf.warmup_epochs);
  c_ablate->add_option("--patience", tf.patience);

  // ----- ccap -----
  auto* c_ccap = app.add_subcommand("ccap", "BF/BH rasters -> urban mask + threshold");
  std::string bf_path, bh_path;
  size_t cc_rows = 0, cc_cols = 0;
  ccap::CcapConfig ccfg;
  c_ccap->add_option("--bf", bf_path)->required();
  c_ccap->add_option("--bh", bh_path)->required();
  c_ccap->add_option("--rows", cc_rows)->required();
  c_ccap->add_option("--cols", cc_cols)->required();
  c_ccap->add_option("--lambda-lo", ccfg.lambda_lo);
  c_ccap->add_option("--lambda-hi", ccfg.lambda_hi);
  c_ccap->add_option("--steps", ccfg.n_steps);
  c_ccap->add_option("--bh-floor", ccfg.bh_floor);
  c_ccap->add_option("--penalty", ccfg.penalty);
  c_ccap->add_flag("--count-uniform", ccfg.count_uniform);
  c_ccap->add_option("--out", out_dir)->required();

  // ----- compare-events -----
  auto* c_cmp = app.add_subcommand("compare-events", "pre/post rasters -> means table");
  std::string pre_bf, pre_bh, post_bf, post_bh, ev_name = "event";
  double ctr_row = 0, ctr_col = 0, radius_m = 1500.0;
  c_cmp->add_option("--pre-bf", pre_bf)->required();
  c_cmp->add_option("--pre-bh", pre_bh)->required();
  c_cmp->add_option("--post-bf", post_bf)->required();
  c_cmp->add_option("--post-bh", post_bh)->required();
  c_cmp->add_option("--rows", cc_rows)->required();
  c_cmp->add_option("--cols", cc_cols)->required();
  c_cmp->add_option("--center-row", ctr_row)->required();
  c_cmp->add_option("--center-col", ctr_col)->required();
  c_cmp->add_option("--radius", radius_m, "metres");
  c_cmp->add_option("--name", ev_name);
  c_cmp->add_option("--lambda-lo", ccfg.lambda_lo);
  c_cmp->add_option("--lambda-hi", ccfg.lambda_hi);
  c_cmp->add_option("--steps", ccfg.n_steps);
  c_cmp->add_option("--bh-floor", ccfg.bh_floor);
  c_cmp->add_option("--penalty", ccfg.penalty);
  c_cmp->add_option("--out", out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  diff::set_num_threads(threads);
  json rc = {{"seed", seed}, {"threads", threads}};

  if (*c_ingest) {
    const auto polys = grid::read_footprints_ndjson(in_footprints);
    grid::FishnetGrid grid;
    grid.x0 = in_ox;
    grid.y0 = in_oy;
    grid.rows = in_rows;
    grid.cols = in_cols;
    grid::LabelGrid labels = grid::aggregate(polys, grid);

    data::CityStack stack;
    stack.city = in_city;
    stack.year = in_year;
    stack.grid = grid;
    const size_t px = in_rows * data::kPatchPx * in_cols * data::kPatchPx;
    for (size_t ch = 0; ch < data::kNumChannels; ++ch)
      stack.channels[ch] = read_raw_f32(
          (fs::path(in_channel_dir) / (std::string(data::kChannelNames[ch]) + ".bin")).string(),
          px);
    stack.bh.assign(in_rows * in_cols, 0.0f);
    stack.bf.assign(in_rows * in_cols, 0.0f);
    stack.valid.assign(in_rows * in_cols, 0);
    for (size_t i = 0; i < labels.cells.size(); ++i) {
      stack.bh[i] = (float)labels.cells[i].h_ave;
      stack.bf[i] = (float)labels.cells[i].lambda_p;
    }
    std::vector<data::Sample> samples = data::samples_from_labels(stack, labels);
    data::write_container({stack}, samples, out_dir);
    rc["subcommand"] = "ingest";
    rc["footprints"] = in_footprints;
    rc["city"] = in_city;
    rc["rows"] = in_rows;
    rc["cols"] = in_cols;
    write_runconfig(out_dir, rc);
    std::printf("ingested %zu buildings into %zu samples\n", polys.size(), samples.size());
  } else if (*c_synth) {
    std::vector<data::CityStack> stacks;
    std::vector<data::Sample> samples;
    for (size_t i = 0; i < sy_cities; ++i) {
      const std::string name = "city" + std::to_string(i);
      data::SynthCity sc =
          data::synth_city(data::derive_seed(seed, "synth-" + name), sy_rows, sy_cols);
      sc.stack.city = name;
      auto s = data::samples_from_labels(sc.stack, sc.labels);
      for (auto& x : s) x.city = name;
      stacks.push_back(std::move(sc.stack));
      samples.insert(samples.end(), s.begin(), s.end());
    }
    data::write_container(stacks, samples, out_dir);
    rc["subcommand"] = "synth";
    rc["cities"] = sy_cities;
    rc["rows"] = sy_rows;
    rc["cols"] = sy_cols;
    write_runconfig(out_dir, rc);
    std::printf("synthesized %zu cities, %zu samples\n", sy_cities, samples.size());
  } else if (*c_split) {
    data::Container c = data::read_container(container_path);
    const auto ratios = parse_ratios(ratios_s);
    std::array<double, 3> norm = ratios;
    split::apply_geosplit(c, sp_k, norm, seed);
    std::vector<std::pair<std::string, split::CellCenter>> cores;
    for (const auto& st : c.stacks) {
      std::vector<data::Sample> city;
      for (const auto& s : c.samples)
        if (s.city == st.city) city.push_back(s);
      cores.emplace_back(st.city, split::find_core(city));
    }
    fs::create_directories(out_dir);
    split::write_split_manifest((fs::path(out_dir) / "split_manifest.csv").string(), c.samples,
                                cores);
    rc["subcommand"] = "split";
    rc["container"] = container_path;
    rc["k"] = sp_k;
    rc["ratios"] = ratios_s;
    write_runconfig(out_dir, rc);
    size_t purged = 0;
    for (const auto& s : c.samples)
      if (s.split == data::Split::purged) ++purged;
    std::printf("split %zu samples (%zu purged)\n", c.samples.size(), purged);
  } else if (*c_train) {
    data::Container c = data::read_container(container_path);
    apply_manifest(c, manifest_path);
    const eval::AblationSpec spec = eval::ablation_by_name(ablation);
    model::ModelConfig mcfg = mf.resolve();
    mcfg.capacity_scale = spec.capacity_scale;
    mcfg.validate();
    const train::TrainConfig tcfg = tf.resolve(seed);
    rc["subcommand"] = "train";
    rc["container"] = container_path;
    rc["manifest"] = manifest_path;
    rc["ablation"] = ablation;
    rc["model"] = mcfg.to_json();
    rc["train"] = tcfg.to_json();
    write_runconfig(out_dir, rc);
    train::TrainResult res =
        resume_path.empty() ? train::train(mcfg, tcfg, c, spec.mask, out_dir)
                            : train::resume(resume_path, c, out_dir);
    std::printf("trained %zu epochs, best epoch %zu, best score %.6g\n", res.epochs_run,
                res.best_epoch, res.best_score);
  } else if (*c_eval) {
    data::Container c = data::read_container(container_path);
    apply_manifest(c, manifest_path);
    model::LoadedModel lm = model::load_model(ckpt_path);
    if (eval_k != 0 && eval_k != lm.config.k)
      throw usage_error("config hash mismatch: checkpoint " + std::to_string(lm.config.hash()) +
                        " was built with k=" + std::to_string(lm.config.k) +
                        ", requested k=" + std::to_string(eval_k));
    const data::NormStats stats = stats_from_json(lm.meta.at("norm_stats"));
    const train::ChannelMask mask = mask_from_json(lm.meta.at("channel_mask"));
    const train::SplitPredictions preds = train::predict_split(
        lm.config, lm.params, c, stats, mask, data::split_from_name(eval_split));
    rc["subcommand"] = "eval";
    rc["checkpoint"] = ckpt_path;
    rc["container"] = container_path;
    rc["split"] = eval_split;
    rc["model"] = lm.config.to_json();
    write_runconfig(out_dir, rc);
    eval::write_eval_reports(out_dir, fs::path(ckpt_path).stem().string(), preds);
    const eval::MetricReport m = eval::metrics(preds.bh_pred, preds.bh_true);
    std::printf("eval %s: bh rmse %.6g, n=%zu\n", eval_split.c_str(), m.rmse, m.n);
  } else if (*c_ablate) {
    data::Container c = data::read_container(container_path);
    apply_manifest(c, manifest_path);
    const model::ModelConfig mcfg = mf.resolve();
    const train::TrainConfig tcfg = tf.resolve(seed);
    rc["subcommand"] = "ablate";
    rc["container"] = container_path;
    rc["model"] = mcfg.to_json();
    rc["train"] = tcfg.to_json();
    write_runconfig(out_dir, rc);
    std::vector<eval::AblationResult> results;
    for (const eval::AblationSpec& spec : eval::standard_ablations()) {
      results.push_back(eval::run_ablation(spec, mcfg, tcfg, c,
                                           (fs::path(out_dir) / spec.name).string()));
      std::printf("%s: bh test rmse %.6g (gap %.6g)\n", spec.name.c_str(),
                  results.back().bh.test_m.rmse, results.back().bh.gap_rmse);
    }
    eval::write_ablation_tables(out_dir, results);
  } else if (*c_ccap) {
    const auto bf = read_raw_f64_from_f32(bf_path, cc_rows * cc_cols);
    const auto bh = read_raw_f64_from_f32(bh_path, cc_rows * cc_cols);
    const ccap::CcapResult res = ccap::select_threshold(bf, bh, cc_rows, cc_cols, ccfg);
    fs::create_directories(out_dir);
    ccap::write_mask_pgm((fs::path(out_dir) / "mask.pgm").string(), res.mask, cc_rows, cc_cols);
    json cands = json::array();
    for (const auto& cd : res.candidates)
      cands.push_back({{"lambda", cd.lambda},
                       {"entropy", cd.entropy},
                       {"mask_fraction", cd.mask_fraction},
                       {"n_clusters", cd.n_clusters}});
    json summary = {{"lambda_star", res.lambda_star},
                    {"n_clusters", res.cluster_sizes.size()},
                    {"cluster_sizes", res.cluster_sizes},
                    {"candidates", cands}};
    std::ofstream sout(fs::path(out_dir) / "ccap.json", std::ios::trunc);
    sout << summary.dump(2) << "\n";
    rc["subcommand"] = "ccap";
    rc["bf"] = bf_path;
    rc["bh"] = bh_path;
    write_runconfig(out_dir, rc);
    std::printf("lambda* = %.6g with %zu clusters\n", res.lambda_star,
                res.cluster_sizes.size());
  } else if (*c_cmp) {
    ccap::EventGrids pre{read_raw_f64_from_f32(pre_bf, cc_rows * cc_cols),
                         read_raw_f64_from_f32(pre_bh, cc_rows * cc_cols), cc_rows, cc_cols};
    ccap::EventGrids post{read_raw_f64_from_f32(post_bf, cc_rows * cc_cols),
                          read_raw_f64_from_f32(post_bh, cc_rows * cc_cols), cc_rows, cc_cols};
    const ccap::EventRow row =
        ccap::event_compare(ev_name, pre, post, ctr_row, ctr_col, radius_m, ccfg);
    fs::create_directories(out_dir);
    std::ofstream tout(fs::path(out_dir) / "event_means.csv", std::ios::trunc);
    tout << ccap::event_table_csv({row});
    rc["subcommand"] = "compare-events";
    rc["name"] = ev_name;
    rc["radius_m"] = radius_m;
    write_runconfig(out_dir, rc);
    std::printf("%s: BF %.4g -> %.4g, BH %.4g -> %.4g\n", ev_name.c_str(), row.bf_pre,
                row.bf_post, row.bh_pre, row.bh_post);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const shape_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
