#include "geoformer/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "geoformer/errors.hpp"

namespace fs = std::filesystem;

namespace geoformer::eval {

namespace {

train::ChannelMask mask_without(std::initializer_list<const char*> dropped) {
  train::ChannelMask m = train::kAllChannels;
  for (const char* name : dropped) m[data::channel_index(name)] = false;
  return m;
}

}  // namespace

void AblationSpec::validate() const {
  train::ChannelMask expect = train::kAllChannels;
  size_t scale = 1;
  if (name == "full") {
  } else if (name == "enlarged") {
    scale = 2;
  } else if (name == "no_dem") {
    expect = mask_without({"DEM"});
  } else if (name == "no_sar") {
    expect = mask_without({"VV", "VH"});
  } else if (name == "no_optical") {
    expect = mask_without({"B2", "B3", "B4", "B8"});
  } else {
    throw usage_error("unknown ablation: " + name);
  }
  if (mask != expect) throw usage_error("ablation " + name + ": channel mask inconsistent");
  if (capacity_scale != scale)
    throw usage_error("ablation " + name + ": capacity scale inconsistent");
  bool any = false;
  for (bool b : mask) any = any || b;
  if (!any) throw usage_error("ablation " + name + ": all channels masked");
}

AblationSpec ablation_by_name(const std::string& name) {
  AblationSpec s;
  s.name = name;
  if (name == "enlarged") s.capacity_scale = 2;
  else if (name == "no_dem") s.mask = mask_without({"DEM"});
  else if (name == "no_sar") s.mask = mask_without({"VV", "VH"});
  else if (name == "no_optical") s.mask = mask_without({"B2", "B3", "B4", "B8"});
  else if (name != "full") throw usage_error("unknown ablation: " + name);
  s.validate();
  return s;
}

std::vector<AblationSpec> standard_ablations() {
  std::vector<AblationSpec> out;
  for (const char* n : {"full", "enlarged", "no_dem", "no_sar", "no_optical"})
    out.push_back(ablation_by_name(n));
  return out;
}

AblationResult run_ablation(const AblationSpec& spec, const model::ModelConfig& base_cfg,
                            const train::TrainConfig& tcfg, const data::Container& container,
                            const std::string& out_dir) {
  spec.validate();
  model::ModelConfig mcfg = base_cfg;
  mcfg.capacity_scale = spec.capacity_scale;
  mcfg.validate();

  fs::create_directories(out_dir);
  train::TrainResult tr = train::train(mcfg, tcfg, container, spec.mask, out_dir);

  AblationResult res;
  res.spec = spec;
  res.best_epoch = tr.best_epoch;
  res.epochs_run = tr.epochs_run;
  for (data::Split split : {data::Split::train, data::Split::test}) {
    train::SplitPredictions p = train::predict_split(mcfg, tr.best_params, container, tr.stats,
                                                     spec.mask, split, tcfg.batch);
    MetricReport mbh = metrics(p.bh_pred, p.bh_true);
    MetricReport mbf = metrics(p.bf_pred, p.bf_true);
    if (split == data::Split::train) {
      res.bh.train_m = mbh;
      res.bf.train_m = mbf;
    } else {
      res.bh.test_m = mbh;
      res.bf.test_m = mbf;
    }
  }
  res.bh.gap_rmse = res.bh.test_m.rmse - res.bh.train_m.rmse;
  res.bf.gap_rmse = res.bf.test_m.rmse - res.bf.train_m.rmse;
  return res;
}

namespace {

void write_table(const std::string& path, const std::vector<const AblationResult*>& runs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write " + path);
  out << "name,task,split,rmse,mae,me,nmad,cc,r2,n,gap_rmse\n";
  char buf[512];
  for (const AblationResult* r : runs)
    for (const char* task : {"bh", "bf"}) {
      const TaskEval& te = std::string(task) == "bh" ? r->bh : r->bf;
      for (const char* split : {"train", "test"}) {
        const MetricReport& m = std::string(split) == "train" ? te.train_m : te.test_m;
        std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%zu,%.6g\n",
                      r->spec.name.c_str(), task, split, m.rmse, m.mae, m.me, m.nmad, m.cc,
                      m.r2, m.n, te.gap_rmse);
        out << buf;
      }
    }
}

}  // namespace

void write_ablation_tables(const std::string& out_dir, const std::vector<AblationResult>& runs) {
  fs::create_directories(out_dir);
  std::vector<const AblationResult*> structural, modality;
  for (const AblationResult& r : runs) {
    if (r.spec.name == "full" || r.spec.name == "enlarged") structural.push_back(&r);
    if (r.spec.name == "full" || r.spec.name.rfind("no_", 0) == 0) modality.push_back(&r);
  }
  write_table((fs::path(out_dir) / "ablation_structural.csv").string(), structural);
  write_table((fs::path(out_dir) / "ablation_modality.csv").string(), modality);
}

nlohmann::json report_json(const MetricReport& r) {
  return {{"rmse", r.rmse}, {"mae", r.mae}, {"me", r.me},  {"nmad", r.nmad},
          {"cc", r.cc},     {"r2", r.r2},   {"n", r.n},    {"degenerate", r.degenerate}};
}

void write_eval_reports(const std::string& out_dir, const std::string& model_id,
                        const train::SplitPredictions& preds) {
  fs::create_directories(out_dir);

  const MetricReport mbh = metrics(preds.bh_pred, preds.bh_true);
  const MetricReport mbf = metrics(preds.bf_pred, preds.bf_true);
  const TrimResult tbh = trim_outliers(preds.bh_pred, preds.bh_true);
  const TrimResult tbf = trim_outliers(preds.bf_pred, preds.bf_true);

  {
    std::ofstream out(fs::path(out_dir) / "metrics.csv", std::ios::trunc);
    if (!out) throw data_error("cannot write metrics.csv");
    out << metric_csv_header();
    out << metric_csv_row(model_id, "bh", "all", mbh);
    out << metric_csv_row(model_id, "bf", "all", mbf);
    out << metric_csv_row(model_id, "bh", "trimmed", tbh.after);
    out << metric_csv_row(model_id, "bf", "trimmed", tbf.after);
  }

  const std::vector<double> he = default_height_edges();
  const std::vector<double> le = default_lambda_edges();
  for (const char* task : {"bh", "bf"}) {
    const bool is_bh = std::string(task) == "bh";
    const auto strata = stratified(is_bh ? preds.bh_pred : preds.bf_pred,
                                   is_bh ? preds.bh_true : preds.bf_true, preds.h_ave,
                                   preds.lambda_p, he, le);
    std::ofstream out(fs::path(out_dir) / ("stratified_" + std::string(task) + ".csv"),
                      std::ios::trunc);
    if (!out) throw data_error("cannot write stratified csv");
    out << "h_lo,h_hi,lambda_lo,lambda_hi,n,sparse,rmse,me,nmad\n";
    char buf[512];
    for (const StratumReport& s : strata) {
      std::snprintf(buf, sizeof(buf), "%.6g,%.6g,%.6g,%.6g,%zu,%d,%.6g,%.6g,%.6g\n", s.h_lo,
                    s.h_hi, s.l_lo, s.l_hi, s.report.n, s.sparse ? 1 : 0, s.report.rmse,
                    s.report.me, s.report.nmad);
      out << buf;
    }
  }

  nlohmann::json trim = {
      {"model", model_id},
      {"q", 0.001},
      {"bh", {{"dropped", tbh.n_dropped}, {"before", report_json(tbh.before)},
              {"after", report_json(tbh.after)}}},
      {"bf", {{"dropped", tbf.n_dropped}, {"before", report_json(tbf.before)},
              {"after", report_json(tbf.after)}}}};
  std::ofstream out(fs::path(out_dir) / "trim.json", std::ios::trunc);
  if (!out) throw data_error("cannot write trim.json");
  out << trim.dump(2) << "\n";
}

std::string rollup_table(
    const std::vector<std::pair<std::string, std::pair<MetricReport, MetricReport>>>& rows) {
  std::string out =
      "model,bh_rmse,bh_mae,bh_me,bh_nmad,bh_cc,bh_r2,bf_rmse,bf_mae,bf_me,bf_nmad,bf_cc,bf_r2\n";
  char buf[512];
  for (const auto& [name, pr] : rows) {
    const MetricReport& a = pr.first;
    const MetricReport& b = pr.second;
    std::snprintf(buf, sizeof(buf),
                  "%s,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n",
                  name.c_str(), a.rmse, a.mae, a.me, a.nmad, a.cc, a.r2, b.rmse, b.mae, b.me,
                  b.nmad, b.cc, b.r2);
    out += buf;
  }
  return out;
}

}  // namespace geoformer::eval
