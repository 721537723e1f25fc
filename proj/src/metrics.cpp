#include "geoformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "geoformer/errors.hpp"

namespace geoformer::eval {

namespace {

double median_inplace(std::vector<double>& v) {
  const size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

MetricReport metrics(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.size() != targets.size())
    throw usage_error("metrics: pred/target length mismatch");
  const size_t n = preds.size();
  if (n < 2) throw usage_error("metrics: need at least 2 samples, got " + std::to_string(n));
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(preds[i]) || !std::isfinite(targets[i]))
      throw numeric_error("metrics: non-finite value at index " + std::to_string(i));

  MetricReport r;
  r.n = n;
  double se = 0.0, ae = 0.0, e_sum = 0.0;
  std::vector<double> res(n);
  for (size_t i = 0; i < n; ++i) {
    const double e = preds[i] - targets[i];
    res[i] = e;
    se += e * e;
    ae += std::abs(e);
    e_sum += e;
  }
  r.rmse = std::sqrt(se / n);
  r.mae = ae / n;
  r.me = e_sum / n;

  std::vector<double> tmp = res;
  const double med = median_inplace(tmp);
  for (size_t i = 0; i < n; ++i) tmp[i] = std::abs(res[i] - med);
  r.nmad = 1.4826 * median_inplace(tmp);

  double pm = 0.0, tm = 0.0;
  for (size_t i = 0; i < n; ++i) {
    pm += preds[i];
    tm += targets[i];
  }
  pm /= n;
  tm /= n;
  double cov = 0.0, vp = 0.0, vt = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < n; ++i) {
    cov += (preds[i] - pm) * (targets[i] - tm);
    vp += (preds[i] - pm) * (preds[i] - pm);
    vt += (targets[i] - tm) * (targets[i] - tm);
    ss_tot += (targets[i] - tm) * (targets[i] - tm);
  }
  if (vt == 0.0 || vp == 0.0) {
    r.degenerate = true;
    r.cc = std::numeric_limits<double>::quiet_NaN();
    r.r2 = vt == 0.0 ? std::numeric_limits<double>::quiet_NaN() : 1.0 - se / ss_tot;
  } else {
    r.cc = cov / (std::sqrt(vp) * std::sqrt(vt));
    r.r2 = 1.0 - se / ss_tot;
  }
  return r;
}

std::vector<double> default_height_edges() {
  return {0.0, 10.0, 20.0, 30.0, 50.0, std::numeric_limits<double>::infinity()};
}

std::vector<double> default_lambda_edges() { return {0.0, 0.1, 0.25, 0.5, 0.7, 1.0}; }

std::vector<StratumReport> stratified(const std::vector<double>& preds,
                                      const std::vector<double>& targets,
                                      const std::vector<double>& h_ave,
                                      const std::vector<double>& lambda_p,
                                      const std::vector<double>& h_edges,
                                      const std::vector<double>& lambda_edges, size_t n_min) {
  if (!std::is_sorted(h_edges.begin(), h_edges.end()) ||
      std::adjacent_find(h_edges.begin(), h_edges.end()) != h_edges.end())
    throw usage_error("stratified: height edges must be strictly increasing");
  if (!std::is_sorted(lambda_edges.begin(), lambda_edges.end()) ||
      std::adjacent_find(lambda_edges.begin(), lambda_edges.end()) != lambda_edges.end())
    throw usage_error("stratified: lambda edges must be strictly increasing");

  const size_t nh = h_edges.size() - 1;
  const size_t nl = lambda_edges.size() - 1;
  auto bin_of = [](double v, const std::vector<double>& edges) -> long {
    for (size_t b = 0; b + 1 < edges.size(); ++b)
      if (v >= edges[b] && v < edges[b + 1]) return (long)b;
    return -1;
  };

  std::vector<std::vector<size_t>> members(nh * nl);
  for (size_t i = 0; i < preds.size(); ++i) {
    const long hb = bin_of(h_ave[i], h_edges);
    const long lb = bin_of(lambda_p[i], lambda_edges);
    if (hb < 0 || lb < 0) continue;
    members[(size_t)hb * nl + (size_t)lb].push_back(i);
  }

  std::vector<StratumReport> out;
  for (size_t hb = 0; hb < nh; ++hb)
    for (size_t lb = 0; lb < nl; ++lb) {
      StratumReport sr;
      sr.h_bin = hb;
      sr.l_bin = lb;
      sr.h_lo = h_edges[hb];
      sr.h_hi = h_edges[hb + 1];
      sr.l_lo = lambda_edges[lb];
      sr.l_hi = lambda_edges[lb + 1];
      const auto& idx = members[hb * nl + lb];
      if (idx.size() < 2) {
        sr.sparse = true;
        sr.report.n = idx.size();
        sr.report.rmse = sr.report.mae = sr.report.me = sr.report.nmad =
            std::numeric_limits<double>::quiet_NaN();
        sr.report.cc = sr.report.r2 = std::numeric_limits<double>::quiet_NaN();
      } else {
        std::vector<double> p, t;
        p.reserve(idx.size());
        t.reserve(idx.size());
        for (size_t i : idx) {
          p.push_back(preds[i]);
          t.push_back(targets[i]);
        }
        sr.report = metrics(p, t);
        sr.sparse = idx.size() < n_min;
      }
      out.push_back(sr);
    }
  return out;
}

TrimResult trim_outliers(const std::vector<double>& preds, const std::vector<double>& targets,
                         double q) {
  if (q <= 0.0 || q >= 0.5) throw usage_error("trim_outliers: q must be in (0, 0.5)");
  const size_t n = preds.size();
  TrimResult res;
  res.before = metrics(preds, targets);
  const size_t drop = (size_t)std::ceil(q * (double)n);
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return std::abs(preds[a] - targets[a]) > std::abs(preds[b] - targets[b]);
  });
  std::vector<char> dropped(n, 0);
  for (size_t i = 0; i < drop && i < n; ++i) dropped[order[i]] = 1;
  std::vector<double> p, t;
  for (size_t i = 0; i < n; ++i)
    if (!dropped[i]) {
      res.kept.push_back(i);
      p.push_back(preds[i]);
      t.push_back(targets[i]);
    }
  res.n_dropped = n - res.kept.size();
  res.after = metrics(p, t);
  return res;
}

std::string metric_csv_header() {
  return "model,task,stratum,n,rmse,mae,me,nmad,cc,r2";
}

std::string metric_csv_row(const std::string& model_id, const std::string& task,
                           const std::string& stratum, const MetricReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << model_id << ',' << task << ',' << stratum << ',' << r.n << ',' << r.rmse << ','
     << r.mae << ',' << r.me << ',' << r.nmad << ',' << r.cc << ',' << r.r2;
  return os.str();
}

}  // namespace geoformer::eval
