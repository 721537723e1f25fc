#include "geoformer/ccap.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <queue>

#include "geoformer/errors.hpp"

namespace geoformer::ccap {

void CcapConfig::validate() const {
  if (!(lambda_lo < lambda_hi)) throw usage_error("ccap: lambda range low must be < high");
  if (n_steps < 2) throw usage_error("ccap: n_steps must be >= 2");
  if (bh_floor < 0.0) throw usage_error("ccap: bh_floor must be >= 0");
}

std::vector<int> label_components(const std::vector<uint8_t>& mask, size_t rows, size_t cols,
                                  std::vector<size_t>& sizes) {
  std::vector<int> labels(rows * cols, -1);
  sizes.clear();
  std::queue<size_t> frontier;
  for (size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || labels[start] >= 0) continue;
    const int id = (int)sizes.size();
    sizes.push_back(0);
    labels[start] = id;
    frontier.push(start);
    while (!frontier.empty()) {
      const size_t cur = frontier.front();
      frontier.pop();
      ++sizes[id];
      const size_t r = cur / cols, c = cur % cols;
      const size_t nbr[4] = {cur - cols, cur + cols, cur - 1, cur + 1};
      const bool ok[4] = {r > 0, r + 1 < rows, c > 0, c + 1 < cols};
      for (int d = 0; d < 4; ++d) {
        if (!ok[d] || !mask[nbr[d]] || labels[nbr[d]] >= 0) continue;
        labels[nbr[d]] = id;
        frontier.push(nbr[d]);
      }
    }
  }
  return labels;
}

double size_entropy(const std::vector<size_t>& sizes, bool count_uniform) {
  if (sizes.empty()) return 0.0;
  double h = 0.0;
  if (count_uniform) {
    std::map<size_t, size_t> hist;
    for (size_t s : sizes) ++hist[s];
    const double total = (double)sizes.size();
    for (const auto& [s, cnt] : hist) {
      const double p = (double)cnt / total;
      h -= p * std::log(p);
    }
  } else {
    double total = 0.0;
    for (size_t s : sizes) total += (double)s;
    for (size_t s : sizes) {
      const double p = (double)s / total;
      h -= p * std::log(p);
    }
  }
  return h;
}

namespace {

std::vector<uint8_t> binarize(const std::vector<double>& bf, const std::vector<double>& bh,
                              double lambda, double bh_floor) {
  std::vector<uint8_t> mask(bf.size());
  for (size_t i = 0; i < bf.size(); ++i)
    mask[i] = (bf[i] >= lambda && bh[i] >= bh_floor) ? 1 : 0;
  return mask;
}

}  // namespace

CcapResult select_threshold(const std::vector<double>& bf, const std::vector<double>& bh,
                            size_t rows, size_t cols, const CcapConfig& cfg) {
  cfg.validate();
  if (rows == 0 || cols == 0) throw data_error("ccap: empty grid");
  if (bf.size() != rows * cols || bh.size() != rows * cols)
    throw data_error("ccap: grid size mismatch");
  for (double v : bf)
    if (!(v >= 0.0 && v <= 1.0)) throw data_error("ccap: BF values must lie in [0,1]");

  CcapResult res;
  res.rows = rows;
  res.cols = cols;
  double best_score = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (size_t i = 0; i < cfg.n_steps; ++i) {
    const double lambda =
        cfg.lambda_lo + (cfg.lambda_hi - cfg.lambda_lo) * (double)i / (double)(cfg.n_steps - 1);
    const std::vector<uint8_t> mask = binarize(bf, bh, lambda, cfg.bh_floor);
    std::vector<size_t> sizes;
    label_components(mask, rows, cols, sizes);
    size_t masked = 0;
    for (uint8_t m : mask) masked += m;

    Candidate cand;
    cand.lambda = lambda;
    cand.n_clusters = sizes.size();
    cand.mask_fraction = (double)masked / (double)(rows * cols);
    if (sizes.empty()) {
      cand.entropy = 0.0;
      cand.score = -std::numeric_limits<double>::infinity();
    } else {
      any = true;
      cand.entropy = size_entropy(sizes, cfg.count_uniform);
      cand.score = cand.entropy - cfg.penalty * cand.mask_fraction;
      if (cand.score > best_score) {
        best_score = cand.score;
        res.lambda_star = lambda;
        res.mask = mask;
        res.cluster_sizes = sizes;
      }
    }
    res.candidates.push_back(cand);
  }
  if (!any) throw data_error("ccap: no urban area at any candidate threshold");
  return res;
}

EventRow event_compare(const std::string& name, const EventGrids& pre, const EventGrids& post,
                       double center_row, double center_col, double radius_m,
                       const CcapConfig& cfg) {
  if (pre.rows != post.rows || pre.cols != post.cols)
    throw data_error("event compare: pre/post grids are not aligned");
  if (radius_m <= 0.0) throw usage_error("event compare: radius must be > 0");

  EventRow row;
  row.name = name;
  const double radius_cells = radius_m / 100.0;
  auto masked_means = [&](const EventGrids& g, double& bf_mean, double& bh_mean, size_t& n) {
    const CcapResult cc = select_threshold(g.bf, g.bh, g.rows, g.cols, cfg);
    double sbf = 0.0, sbh = 0.0;
    n = 0;
    for (size_t r = 0; r < g.rows; ++r)
      for (size_t c = 0; c < g.cols; ++c) {
        if (!cc.mask[r * g.cols + c]) continue;
        if (std::hypot((double)r - center_row, (double)c - center_col) > radius_cells) continue;
        sbf += g.bf[r * g.cols + c];
        sbh += g.bh[r * g.cols + c];
        ++n;
      }
    if (n == 0) throw data_error("event compare: no masked cells within radius (" + name + ")");
    bf_mean = sbf / (double)n;
    bh_mean = sbh / (double)n;
  };
  masked_means(pre, row.bf_pre, row.bh_pre, row.n_pre);
  masked_means(post, row.bf_post, row.bh_post, row.n_post);
  return row;
}

std::string event_table_csv(const std::vector<EventRow>& rows) {
  std::string out = "city,bf_pre,bf_post,bf_delta,bh_pre,bh_post,bh_delta,n_pre,n_post\n";
  char buf[512];
  auto emit = [&](const EventRow& r) {
    std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%zu,%zu\n",
                  r.name.c_str(), r.bf_pre, r.bf_post, r.bf_post - r.bf_pre, r.bh_pre,
                  r.bh_post, r.bh_post - r.bh_pre, r.n_pre, r.n_post);
    out += buf;
  };
  for (const EventRow& r : rows) emit(r);
  if (rows.size() > 1) {
    EventRow overall;
    overall.name = "overall";
    double wpre = 0.0, wpost = 0.0;
    for (const EventRow& r : rows) {
      overall.bf_pre += r.bf_pre * (double)r.n_pre;
      overall.bh_pre += r.bh_pre * (double)r.n_pre;
      overall.bf_post += r.bf_post * (double)r.n_post;
      overall.bh_post += r.bh_post * (double)r.n_post;
      wpre += (double)r.n_pre;
      wpost += (double)r.n_post;
      overall.n_pre += r.n_pre;
      overall.n_post += r.n_post;
    }
    overall.bf_pre /= wpre;
    overall.bh_pre /= wpre;
    overall.bf_post /= wpost;
    overall.bh_post /= wpost;
    emit(overall);
  }
  return out;
}

void write_mask_pgm(const std::string& path, const std::vector<uint8_t>& mask, size_t rows,
                    size_t cols) {
  if (mask.size() != rows * cols) throw usage_error("mask pgm: size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write " + path);
  out << "P5\n" << cols << " " << rows << "\n255\n";
  for (uint8_t m : mask) out.put(m ? (char)255 : (char)0);
}

}  // namespace geoformer::ccap
