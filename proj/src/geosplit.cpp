#include "geoformer/geosplit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "geoformer/errors.hpp"

namespace geoformer::split {

CellCenter find_core(const std::vector<data::Sample>& city_samples) {
  if (city_samples.empty()) throw data_error("find_core: city has no valid samples");
  double wr = 0.0, wc = 0.0, w = 0.0;
  for (const data::Sample& s : city_samples) {
    wr += s.lambda_p * (double)s.row;
    wc += s.lambda_p * (double)s.col;
    w += s.lambda_p;
  }
  if (w <= 0.0) throw data_error("find_core: total lambda_p is zero");
  return {wr / w, wc / w};
}

int sector_of(double row, double col, const CellCenter& core) {
  const double dy = row - core.row;
  const double dx = col - core.col;
  double theta = std::atan2(dy, dx) * 180.0 / M_PI;  // (-180, 180]
  if (theta < 0.0) theta += 360.0;
  int s = (int)(theta / 36.0);
  return std::min(s, kNumSectors - 1);
}

std::vector<SectorAssignment> split_city(std::vector<data::Sample>& samples,
                                         const CellCenter& core, std::array<double, 3> ratios,
                                         uint64_t /*seed*/) {
  if (samples.size() < 10)
    throw data_error("split_city: need at least 10 valid samples, got " +
                     std::to_string(samples.size()));
  const double rsum = ratios[0] + ratios[1] + ratios[2];
  for (double& r : ratios) r /= rsum;

  std::array<size_t, kNumSectors> counts{};
  for (const data::Sample& s : samples) counts[sector_of((double)s.row, (double)s.col, core)]++;

  std::vector<int> order;
  for (int i = 0; i < kNumSectors; ++i)
    if (counts[i] > 0) order.push_back(i);
  if (order.size() < 3)
    throw data_error("split_city: fewer than 3 non-empty sectors; split manually");
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return counts[a] > counts[b]; });

  const size_t total = samples.size();
  std::array<double, 3> assigned_frac{0.0, 0.0, 0.0};
  std::array<bool, 3> has_sector{false, false, false};
  std::array<data::Split, kNumSectors> sector_split;
  sector_split.fill(data::Split::train);

  for (size_t pos = 0; pos < order.size(); ++pos) {
    const int sec = order[pos];
    const size_t remaining = order.size() - pos;
    const size_t empty_splits = (size_t)std::count(has_sector.begin(), has_sector.end(), false);

    int best = -1;
    double best_deficit = -std::numeric_limits<double>::infinity();
    for (int sp = 0; sp < 3; ++sp) {
      // once only as many sectors remain as splits without one, reserve them
      if (remaining <= empty_splits && has_sector[sp]) continue;
      const double deficit = ratios[sp] - assigned_frac[sp];
      if (deficit > best_deficit) {  // ties keep the earlier split (train > val > test)
        best_deficit = deficit;
        best = sp;
      }
    }
    sector_split[sec] = (data::Split)best;
    assigned_frac[best] += (double)counts[sec] / (double)total;
    has_sector[best] = true;
  }

  for (data::Sample& s : samples)
    s.split = sector_split[sector_of((double)s.row, (double)s.col, core)];

  std::vector<SectorAssignment> out;
  for (int i = 0; i < kNumSectors; ++i) {
    SectorAssignment a;
    a.city = samples.front().city;
    a.sector = i;
    a.theta_lo_deg = 36.0 * i;
    a.theta_hi_deg = 36.0 * (i + 1);
    a.split = sector_split[i];
    a.count = counts[i];
    out.push_back(a);
  }
  return out;
}

std::array<data::Split, kNumSectors> sector_split_map(
    const std::vector<SectorAssignment>& assignments) {
  std::array<data::Split, kNumSectors> m;
  m.fill(data::Split::train);
  for (const SectorAssignment& a : assignments) m[a.sector] = a.split;
  return m;
}

size_t purge_boundary(std::vector<data::Sample>& samples, size_t k, size_t rows, size_t cols,
                      const CellCenter& core,
                      const std::array<data::Split, kNumSectors>& sector_split) {
  if (k % 2 == 0) throw usage_error("purge_boundary: k must be odd");
  const long half = (long)k / 2;
  size_t purged = 0;
  for (data::Sample& s : samples) {
    if (s.split != data::Split::train) continue;
    bool leak = false;
    for (long dr = -half; dr <= half && !leak; ++dr)
      for (long dc = -half; dc <= half && !leak; ++dc) {
        const long r = (long)s.row + dr, c = (long)s.col + dc;
        if (r < 0 || c < 0 || r >= (long)rows || c >= (long)cols) continue;  // padding
        const data::Split sp = sector_split[sector_of((double)r, (double)c, core)];
        if (sp == data::Split::val || sp == data::Split::test) leak = true;
      }
    if (leak) {
      s.split = data::Split::purged;
      ++purged;
    }
  }
  return purged;
}

std::vector<RingStats> ring_stats(const std::vector<data::Sample>& samples,
                                  const CellCenter& core, double band_m, size_t n_bands) {
  std::vector<RingStats> out(n_bands);
  std::vector<double> bh_sum(n_bands, 0.0), bh_sq(n_bands, 0.0);
  std::vector<double> bf_sum(n_bands, 0.0), bf_sq(n_bands, 0.0);
  for (size_t b = 0; b < n_bands; ++b) {
    out[b].radius_lo_m = band_m * (double)b;
    out[b].radius_hi_m = band_m * (double)(b + 1);
  }
  for (const data::Sample& s : samples) {
    const double d = 100.0 * std::hypot((double)s.row - core.row, (double)s.col - core.col);
    const long b = (long)(d / band_m);
    if (b < 0 || b >= (long)n_bands) continue;
    out[b].count++;
    bh_sum[b] += s.h_ave;
    bh_sq[b] += s.h_ave * s.h_ave;
    bf_sum[b] += s.lambda_p;
    bf_sq[b] += s.lambda_p * s.lambda_p;
  }
  for (size_t b = 0; b < n_bands; ++b) {
    if (out[b].count == 0) {
      out[b].bh_mean = out[b].bh_std = out[b].bf_mean = out[b].bf_std =
          std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const double n = (double)out[b].count;
    out[b].bh_mean = bh_sum[b] / n;
    out[b].bh_std = std::sqrt(std::max(bh_sq[b] / n - out[b].bh_mean * out[b].bh_mean, 0.0));
    out[b].bf_mean = bf_sum[b] / n;
    out[b].bf_std = std::sqrt(std::max(bf_sq[b] / n - out[b].bf_mean * out[b].bf_mean, 0.0));
  }
  return out;
}

std::vector<SectorAssignment> apply_geosplit(data::Container& container, size_t k,
                                             std::array<double, 3> ratios, uint64_t seed) {
  std::vector<SectorAssignment> all;
  for (const data::CityStack& stack : container.stacks) {
    std::vector<size_t> idx;
    std::vector<data::Sample> city;
    for (size_t i = 0; i < container.samples.size(); ++i)
      if (container.samples[i].city == stack.city) {
        idx.push_back(i);
        city.push_back(container.samples[i]);
      }
    if (city.empty()) continue;
    const CellCenter core = find_core(city);
    auto assignments = split_city(city, core, ratios, seed);
    if (k > 1)
      purge_boundary(city, k, stack.rows(), stack.cols(), core, sector_split_map(assignments));
    for (size_t j = 0; j < idx.size(); ++j) container.samples[idx[j]].split = city[j].split;
    all.insert(all.end(), assignments.begin(), assignments.end());
  }
  return all;
}

void write_split_manifest(const std::string& path, const std::vector<data::Sample>& samples,
                          const std::vector<std::pair<std::string, CellCenter>>& cores) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write " + path);
  out << "city,row,col,sector,split\n";
  for (const data::Sample& s : samples) {
    int sec = -1;
    for (const auto& [city, core] : cores)
      if (city == s.city) sec = sector_of((double)s.row, (double)s.col, core);
    out << s.city << ',' << s.row << ',' << s.col << ',' << sec << ','
        << data::split_name(s.split) << '\n';
  }
}

}  // namespace geoformer::split
