#include "geoformer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "geoformer/errors.hpp"
#include "geoformer/metrics.hpp"

namespace fs = std::filesystem;

namespace geoformer::train {

using diff::Tensor;
using diff::Var;

void TrainConfig::validate() const {
  if (lr0 <= 0.0) throw usage_error("train config: lr0 must be > 0");
  if (batch < 1) throw usage_error("train config: batch must be >= 1");
  if (patience < 1) throw usage_error("train config: patience must be >= 1");
  if (max_epochs < 1) throw usage_error("train config: max_epochs must be >= 1");
  if (warmup_epochs >= max_epochs)
    throw usage_error("train config: warmup_epochs must be < max_epochs");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr0", lr0},           {"weight_decay", weight_decay},
          {"batch", batch},       {"max_epochs", max_epochs},
          {"warmup_epochs", warmup_epochs}, {"patience", patience},
          {"seed", seed},         {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr0 = j.value("lr0", 1e-4);
  c.weight_decay = j.value("weight_decay", 1e-2);
  c.batch = j.value("batch", (size_t)64);
  c.max_epochs = j.value("max_epochs", (size_t)150);
  c.warmup_epochs = j.value("warmup_epochs", (size_t)5);
  c.patience = j.value("patience", (size_t)10);
  c.seed = j.value("seed", (uint64_t)0);
  c.grad_clip = j.value("grad_clip", 0.0);
  return c;
}

double lr_schedule(const TrainConfig& cfg, size_t epoch) {
  if (cfg.warmup_epochs > 0 && epoch <= cfg.warmup_epochs)
    return cfg.lr0 * (double)epoch / (double)cfg.warmup_epochs;
  const double t = (double)(epoch - cfg.warmup_epochs) /
                   (double)(cfg.max_epochs - cfg.warmup_epochs);
  return 0.5 * cfg.lr0 * (1.0 + std::cos(M_PI * std::min(t, 1.0)));
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch},       {"train_loss", train_loss},
          {"val_mae_bh", val_mae_bh}, {"val_mae_bf", val_mae_bf},
          {"val_r2_bh", val_r2_bh},   {"val_r2_bf", val_r2_bf},
          {"score", score},       {"lr", lr},
          {"delta_bh", delta_bh}, {"delta_bf", delta_bf},
          {"sigma_bh", sigma_bh}, {"sigma_bf", sigma_bf}};
}

EpochLog EpochLog::from_json(const nlohmann::json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<size_t>();
  e.train_loss = j.at("train_loss").get<double>();
  e.val_mae_bh = j.at("val_mae_bh").get<double>();
  e.val_mae_bf = j.at("val_mae_bf").get<double>();
  e.val_r2_bh = j.at("val_r2_bh").get<double>();
  e.val_r2_bf = j.at("val_r2_bf").get<double>();
  e.score = j.at("score").get<double>();
  e.lr = j.at("lr").get<double>();
  e.delta_bh = j.at("delta_bh").get<double>();
  e.delta_bf = j.at("delta_bf").get<double>();
  e.sigma_bh = j.at("sigma_bh").get<double>();
  e.sigma_bf = j.at("sigma_bf").get<double>();
  return e;
}

void write_trainlog_csv(const std::string& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write " + path);
  out << "epoch,train_loss,val_mae_bh,val_mae_bf,val_r2_bh,val_r2_bf,score,lr,"
         "delta_bh,delta_bf,sigma_bh,sigma_bf\n";
  char buf[512];
  for (const EpochLog& e : log) {
    std::snprintf(buf, sizeof(buf),
                  "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  e.epoch, e.train_loss, e.val_mae_bh, e.val_mae_bf, e.val_r2_bh, e.val_r2_bf,
                  e.score, e.lr, e.delta_bh, e.delta_bf, e.sigma_bh, e.sigma_bf);
    out << buf;
  }
}

void AdamW::init(const model::ParamMap& params) {
  t = 0;
  m.clear();
  v.clear();
  for (const auto& [name, p] : params) {
    m.emplace_back(p.shape());
    v.emplace_back(p.shape());
  }
}

void AdamW::step(model::ParamMap& params, const std::vector<Tensor>& grads, double lr,
                 double weight_decay, const std::vector<bool>& decay_mask) {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, (double)t);
  const double bc2 = 1.0 - std::pow(beta2, (double)t);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi].second;
    const Tensor& g = grads[pi];
    if (weight_decay > 0.0 && decay_mask[pi])
      for (size_t i = 0; i < p.numel(); ++i) p[i] -= lr * weight_decay * p[i];
    for (size_t i = 0; i < p.numel(); ++i) {
      m[pi][i] = beta1 * m[pi][i] + (1.0 - beta1) * g[i];
      v[pi][i] = beta2 * v[pi][i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[pi][i] / bc1;
      const double vhat = v[pi][i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ----- data plumbing ---------------------------------------------------------

namespace {

struct SampleRef {
  const data::CityStack* stack;
  const data::Sample* sample;
};

std::vector<SampleRef> collect(const data::Container& c, data::Split split) {
  std::vector<SampleRef> out;
  for (const data::Sample& s : c.samples) {
    if (s.split != split) continue;
    out.push_back({&c.stack(s.city), &s});
  }
  return out;
}

// deterministic Fisher-Yates; independent of std::shuffle's unspecified choice
void shuffle_indices(std::vector<size_t>& idx, uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (size_t i = idx.size(); i > 1; --i) {
    const size_t j = (size_t)(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

struct BatchData {
  std::vector<data::ContextTensor> contexts;
  std::vector<const data::ContextTensor*> ptrs;
  Tensor bh_t, bf_t;
};

BatchData assemble_batch(const std::vector<SampleRef>& refs, const std::vector<size_t>& order,
                         size_t begin, size_t end, size_t k, const data::NormStats& stats,
                         const ChannelMask& mask) {
  BatchData b;
  const size_t n = end - begin;
  b.bh_t = Tensor({n});
  b.bf_t = Tensor({n});
  b.contexts.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const SampleRef& r = refs[order[begin + i]];
    b.contexts.push_back(data::assemble_context(*r.stack, *r.sample, k, stats, mask));
    b.bh_t[i] = r.sample->h_ave;
    b.bf_t[i] = r.sample->lambda_p;
  }
  for (const auto& c : b.contexts) b.ptrs.push_back(&c);
  return b;
}

struct LoopState {
  model::ModelConfig mcfg;
  TrainConfig tcfg;
  ChannelMask mask{};
  data::NormStats stats;
  model::ParamMap all_params;  // model params then loss.log_sigma_{bh,bf}
  loss::LossState lstate;
  AdamW opt;
  size_t next_epoch = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  size_t best_epoch = 0;
  size_t bad_epochs = 0;
  TrainLog log;
  model::ParamMap best_params;
  loss::LossState best_lstate;
};

model::ParamMap model_only(const model::ParamMap& all) {
  model::ParamMap out;
  for (const auto& [n, t] : all)
    if (n.rfind("loss.", 0) != 0) out.emplace_back(n, t);
  return out;
}

nlohmann::json loss_state_json(const loss::LossState& s) {
  return {{"log_sigma_bh", s.log_sigma_bh}, {"log_sigma_bf", s.log_sigma_bf},
          {"delta_bh", s.delta_bh},         {"delta_bf", s.delta_bf},
          {"delta_min_bh", s.delta_min_bh}, {"delta_max_bh", s.delta_max_bh},
          {"delta_min_bf", s.delta_min_bf}, {"delta_max_bf", s.delta_max_bf}};
}

loss::LossState loss_state_from_json(const nlohmann::json& j) {
  loss::LossState s;
  s.log_sigma_bh = j.at("log_sigma_bh").get<double>();
  s.log_sigma_bf = j.at("log_sigma_bf").get<double>();
  s.delta_bh = j.at("delta_bh").get<double>();
  s.delta_bf = j.at("delta_bf").get<double>();
  s.delta_min_bh = j.at("delta_min_bh").get<double>();
  s.delta_max_bh = j.at("delta_max_bh").get<double>();
  s.delta_min_bf = j.at("delta_min_bf").get<double>();
  s.delta_max_bf = j.at("delta_max_bf").get<double>();
  return s;
}

nlohmann::json stats_json(const data::NormStats& st) {
  return {{"mean", st.mean}, {"stdev", st.stdev}};
}

data::NormStats stats_from_json(const nlohmann::json& j) {
  data::NormStats st;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto stdev = j.at("stdev").get<std::vector<double>>();
  std::copy(mean.begin(), mean.end(), st.mean.begin());
  std::copy(stdev.begin(), stdev.end(), st.stdev.begin());
  return st;
}

void save_last(const LoopState& st, const std::string& path) {
  model::ParamMap entries = st.all_params;
  for (size_t i = 0; i < st.all_params.size(); ++i) {
    entries.emplace_back("adam.m." + st.all_params[i].first, st.opt.m[i]);
    entries.emplace_back("adam.v." + st.all_params[i].first, st.opt.v[i]);
  }
  nlohmann::json log_j = nlohmann::json::array();
  for (const EpochLog& e : st.log) log_j.push_back(e.to_json());
  // best params ride along so a resumed run can still report them
  for (const auto& [n, t] : st.best_params) entries.emplace_back("best." + n, t);

  nlohmann::json meta = {{"config", st.mcfg.to_json()},
                         {"config_hash", st.mcfg.hash()},
                         {"train_config", st.tcfg.to_json()},
                         {"channel_mask", st.mask},
                         {"norm_stats", stats_json(st.stats)},
                         {"loss_state", loss_state_json(st.lstate)},
                         {"best_loss_state", loss_state_json(st.best_lstate)},
                         {"next_epoch", st.next_epoch},
                         {"step", st.opt.t},
                         {"best_score", st.best_score},
                         {"best_epoch", st.best_epoch},
                         {"bad_epochs", st.bad_epochs},
                         {"log", log_j}};
  diff::write_params(path, entries, meta);
}

LoopState load_last(const std::string& path) {
  diff::ParamFile pf = diff::read_params(path);
  LoopState st;
  st.mcfg = model::ModelConfig::from_json(pf.meta.at("config"));
  if (st.mcfg.hash() != pf.meta.at("config_hash").get<uint64_t>())
    throw usage_error("resume: checkpoint config hash mismatch");
  st.tcfg = TrainConfig::from_json(pf.meta.at("train_config"));
  const auto mask = pf.meta.at("channel_mask").get<std::vector<bool>>();
  std::copy(mask.begin(), mask.end(), st.mask.begin());
  st.stats = stats_from_json(pf.meta.at("norm_stats"));
  st.lstate = loss_state_from_json(pf.meta.at("loss_state"));
  st.best_lstate = loss_state_from_json(pf.meta.at("best_loss_state"));
  st.next_epoch = pf.meta.at("next_epoch").get<size_t>();
  st.best_score = pf.meta.at("best_score").get<double>();
  st.best_epoch = pf.meta.at("best_epoch").get<size_t>();
  st.bad_epochs = pf.meta.at("bad_epochs").get<size_t>();
  for (const auto& e : pf.meta.at("log")) st.log.push_back(EpochLog::from_json(e));

  for (const auto& [n, t] : pf.tensors) {
    if (n.rfind("adam.", 0) == 0 || n.rfind("best.", 0) == 0) continue;
    st.all_params.emplace_back(n, t);
  }
  st.opt.t = pf.meta.at("step").get<size_t>();
  for (const auto& [n, t] : st.all_params) {
    st.opt.m.push_back(pf.find("adam.m." + n));
    st.opt.v.push_back(pf.find("adam.v." + n));
  }
  for (const auto& [n, t] : pf.tensors)
    if (n.rfind("best.", 0) == 0) st.best_params.emplace_back(n.substr(5), t);
  return st;
}

TrainResult run_loop(LoopState& st, const data::Container& container,
                     const std::string& out_dir, size_t epoch_limit) {
  fs::create_directories(out_dir);
  const auto train_refs = collect(container, data::Split::train);
  const auto val_refs = collect(container, data::Split::val);
  if (train_refs.empty()) throw data_error("train: empty training split");
  if (val_refs.empty()) throw data_error("train: empty validation split");

  std::vector<bool> decay_mask;
  for (const auto& [n, t] : st.all_params) decay_mask.push_back(n.rfind("loss.", 0) != 0);

  const size_t k = st.mcfg.k;
  const size_t B = st.tcfg.batch;

  auto sync_sigma_to_state = [&]() {
    for (const auto& [n, t] : st.all_params) {
      if (n == "loss.log_sigma_bh") st.lstate.log_sigma_bh = t[0];
      if (n == "loss.log_sigma_bf") st.lstate.log_sigma_bf = t[0];
    }
  };

  bool stopped = false;
  size_t ran_here = 0;
  for (size_t epoch = st.next_epoch; epoch < st.tcfg.max_epochs && !stopped; ++epoch) {
    if (epoch_limit > 0 && ran_here == epoch_limit) break;
    ++ran_here;
    const double lr = lr_schedule(st.tcfg, epoch);

    std::vector<size_t> order(train_refs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_indices(order, data::derive_seed(st.tcfg.seed,
                                             "shuffle-epoch-" + std::to_string(epoch)));

    double loss_sum = 0.0;
    size_t n_batches = 0;
    std::vector<double> res_bh, res_bf;
    res_bh.reserve(train_refs.size());
    res_bf.reserve(train_refs.size());

    for (size_t begin = 0; begin < order.size(); begin += B) {
      const size_t end = std::min(begin + B, order.size());
      BatchData bd = assemble_batch(train_refs, order, begin, end, k, st.stats, st.mask);

      diff::Tape tape;
      model::BoundParams bp = model::bind_params(tape, st.all_params, true);
      model::Predictions pr = model::forward_batch(tape, st.mcfg, bp, bd.ptrs);
      Var bh_t = tape.constant(bd.bh_t);
      Var bf_t = tape.constant(bd.bf_t);
      Var l_bh = diff::mean_all(diff::huber(pr.bh, bh_t, st.lstate.delta_bh));
      Var l_bf = diff::mean_all(diff::huber(pr.bf, bf_t, st.lstate.delta_bf));
      Var total = loss::total_loss(l_bh, l_bf, bp.at("loss.log_sigma_bh"),
                                   bp.at("loss.log_sigma_bf"));
      const double total_v = total.value()[0];
      if (!std::isfinite(total_v))
        throw numeric_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(n_batches));
      tape.backward(total);

      for (size_t i = 0; i < bd.ptrs.size(); ++i) {
        res_bh.push_back(pr.bh.value()[i] - bd.bh_t[i]);
        res_bf.push_back(pr.bf.value()[i] - bd.bf_t[i]);
      }

      std::vector<Tensor> grads;
      grads.reserve(st.all_params.size());
      for (const auto& [n, t] : st.all_params) {
        const Tensor& g = bp.at(n).grad();
        grads.push_back(g.numel() ? g : Tensor(t.shape()));
      }
      if (st.tcfg.grad_clip > 0.0) {
        double nrm2 = 0.0;
        for (const Tensor& g : grads)
          for (size_t i = 0; i < g.numel(); ++i) nrm2 += g[i] * g[i];
        const double nrm = std::sqrt(nrm2);
        if (nrm > st.tcfg.grad_clip) {
          const double sc = st.tcfg.grad_clip / nrm;
          for (Tensor& g : grads)
            for (size_t i = 0; i < g.numel(); ++i) g[i] *= sc;
        }
      }
      st.opt.step(st.all_params, grads, lr, st.tcfg.weight_decay, decay_mask);
      sync_sigma_to_state();
      loss_sum += total_v;
      ++n_batches;
    }

    // delta adaptation takes effect next epoch
    loss::update_delta(st.lstate, res_bh, res_bf);

    const model::ParamMap mp = model_only(st.all_params);
    SplitPredictions vp = predict_split(st.mcfg, mp, container, st.stats, st.mask,
                                        data::Split::val, B);
    const eval::MetricReport mr_bh = eval::metrics(vp.bh_pred, vp.bh_true);
    const eval::MetricReport mr_bf = eval::metrics(vp.bf_pred, vp.bf_true);
    const double score = 0.5 * (mr_bh.r2 + mr_bf.r2);

    EpochLog el;
    el.epoch = epoch;
    el.train_loss = loss_sum / (double)n_batches;
    el.val_mae_bh = mr_bh.mae;
    el.val_mae_bf = mr_bf.mae;
    el.val_r2_bh = mr_bh.r2;
    el.val_r2_bf = mr_bf.r2;
    el.score = score;
    el.lr = lr;
    el.delta_bh = st.lstate.delta_bh;
    el.delta_bf = st.lstate.delta_bf;
    el.sigma_bh = std::exp(st.lstate.log_sigma_bh);
    el.sigma_bf = std::exp(st.lstate.log_sigma_bf);
    st.log.push_back(el);

    if (score > st.best_score) {
      st.best_score = score;
      st.best_epoch = epoch;
      st.bad_epochs = 0;
      st.best_params = mp;
      st.best_lstate = st.lstate;
      model::save_model((fs::path(out_dir) / "best.ckpt").string(), st.mcfg, st.best_params,
                        {{"train_config", st.tcfg.to_json()},
                         {"channel_mask", st.mask},
                         {"norm_stats", stats_json(st.stats)},
                         {"loss_state", loss_state_json(st.best_lstate)},
                         {"epoch", epoch},
                         {"score", score}});
    } else {
      st.bad_epochs += 1;
      if (st.bad_epochs >= st.tcfg.patience) stopped = true;
    }
    st.next_epoch = epoch + 1;
    save_last(st, (fs::path(out_dir) / "last.ckpt").string());
  }

  write_trainlog_csv((fs::path(out_dir) / "trainlog.csv").string(), st.log);

  TrainResult res;
  res.best_params = st.best_params;
  res.best_loss_state = st.best_lstate;
  res.stats = st.stats;
  res.log = st.log;
  res.best_epoch = st.best_epoch;
  res.best_score = st.best_score;
  res.epochs_run = st.next_epoch;
  return res;
}

}  // namespace

SplitPredictions predict_split(const model::ModelConfig& cfg, const model::ParamMap& params,
                               const data::Container& container, const data::NormStats& stats,
                               const ChannelMask& mask, data::Split split, size_t batch) {
  const auto refs = collect(container, split);
  if (refs.empty())
    throw data_error(std::string("predict_split: empty split ") + data::split_name(split));
  std::vector<size_t> order(refs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  SplitPredictions out;
  for (size_t begin = 0; begin < refs.size(); begin += batch) {
    const size_t end = std::min(begin + batch, refs.size());
    BatchData bd = assemble_batch(refs, order, begin, end, cfg.k, stats, mask);
    diff::Tape tape;
    model::BoundParams bp = model::bind_params(tape, params, false);
    model::Predictions pr = model::forward_batch(tape, cfg, bp, bd.ptrs);
    for (size_t i = 0; i < bd.ptrs.size(); ++i) {
      out.bh_pred.push_back(pr.bh.value()[i]);
      out.bf_pred.push_back(pr.bf.value()[i]);
      out.bh_true.push_back(bd.bh_t[i]);
      out.bf_true.push_back(bd.bf_t[i]);
      out.h_ave.push_back(bd.bh_t[i]);
      out.lambda_p.push_back(bd.bf_t[i]);
    }
  }
  return out;
}

TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const data::Container& container, const ChannelMask& channel_mask,
                  const std::string& out_dir, size_t epoch_limit) {
  mcfg.validate();
  tcfg.validate();

  LoopState st;
  st.mcfg = mcfg;
  st.tcfg = tcfg;
  st.mask = channel_mask;
  st.stats = data::compute_norm_stats(container.stacks, container.samples);
  st.all_params = model::init_params(mcfg, data::derive_seed(tcfg.seed, "init"));
  st.all_params.emplace_back("loss.log_sigma_bh", Tensor::scalar(0.0));
  st.all_params.emplace_back("loss.log_sigma_bf", Tensor::scalar(0.0));
  st.opt.init(st.all_params);

  // delta^(0): residual MAE of the freshly initialized model on the train split
  SplitPredictions tp = predict_split(mcfg, model_only(st.all_params), container, st.stats,
                                      channel_mask, data::Split::train, tcfg.batch);
  std::vector<double> r_bh(tp.bh_pred.size()), r_bf(tp.bf_pred.size());
  for (size_t i = 0; i < r_bh.size(); ++i) {
    r_bh[i] = tp.bh_pred[i] - tp.bh_true[i];
    r_bf[i] = tp.bf_pred[i] - tp.bf_true[i];
  }
  loss::init_delta(st.lstate, r_bh, r_bf);
  st.best_lstate = st.lstate;
  st.best_params = model_only(st.all_params);

  return run_loop(st, container, out_dir, epoch_limit);
}

TrainResult resume(const std::string& last_checkpoint, const data::Container& container,
                   const std::string& out_dir, size_t epoch_limit) {
  LoopState st = load_last(last_checkpoint);
  return run_loop(st, container, out_dir, epoch_limit);
}

}  // namespace geoformer::train
