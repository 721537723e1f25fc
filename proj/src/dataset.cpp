#include "geoformer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "geoformer/checkpoint.hpp"
#include "geoformer/errors.hpp"

namespace fs = std::filesystem;

namespace geoformer::data {

size_t channel_index(const std::string& name) {
  for (size_t i = 0; i < kNumChannels; ++i)
    if (name == kChannelNames[i]) return i;
  throw data_error("unknown channel name: " + name);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::purged: return "purged";
  }
  return "?";
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "purged") return Split::purged;
  throw data_error("unknown split name: " + s);
}

void CityStack::validate() const {
  if (grid.rows < 1 || grid.cols < 1) throw data_error("city " + city + ": empty grid");
  const size_t px = px_rows() * px_cols();
  for (size_t c = 0; c < kNumChannels; ++c)
    if (channels[c].size() != px)
      throw data_error("city " + city + ": channel " + kChannelNames[c] +
                       " has wrong size (raster dims must be 10x the label dims)");
  if (bh.size() != rows() * cols() || bf.size() != rows() * cols())
    throw data_error("city " + city + ": label grid size mismatch");
  for (size_t i = 0; i < valid.size(); ++i)
    if (valid[i]) {
      if (!std::isfinite(bh[i]) || !std::isfinite(bf[i]))
        throw data_error("city " + city + ": non-finite label on a valid cell");
    }
}

// ----- container -----------------------------------------------------------

namespace {

void append_array(std::vector<char>& blob, nlohmann::json& arrays, const std::string& name,
                  const float* p, size_t n) {
  arrays[name] = {{"offset", blob.size()}, {"nbytes", n * sizeof(float)}};
  const size_t old = blob.size();
  blob.resize(old + n * sizeof(float));
  std::memcpy(blob.data() + old, p, n * sizeof(float));
}

std::vector<float> take_array(const std::vector<char>& blob, const nlohmann::json& arrays,
                              const std::string& name, size_t expect, const std::string& city) {
  if (!arrays.contains(name))
    throw data_error("container: city " + city + " is missing declared array '" + name + "'");
  const size_t off = arrays[name].at("offset").get<size_t>();
  const size_t nbytes = arrays[name].at("nbytes").get<size_t>();
  if (off + nbytes > blob.size())
    throw data_error("container: truncated array '" + name + "' in city " + city);
  if (nbytes != expect * sizeof(float))
    throw data_error("container: array '" + name + "' in city " + city + " has wrong size");
  std::vector<float> out(expect);
  std::memcpy(out.data(), blob.data() + off, nbytes);
  return out;
}

}  // namespace

void write_container(const std::vector<CityStack>& stacks, const std::vector<Sample>& samples,
                     const std::string& path) {
  fs::create_directories(path);
  nlohmann::json cities = nlohmann::json::array();
  for (const CityStack& s : stacks) {
    s.validate();
    std::vector<char> blob;
    nlohmann::json arrays = nlohmann::json::object();
    for (size_t c = 0; c < kNumChannels; ++c)
      append_array(blob, arrays, kChannelNames[c], s.channels[c].data(), s.channels[c].size());
    append_array(blob, arrays, "BH", s.bh.data(), s.bh.size());
    append_array(blob, arrays, "BF", s.bf.data(), s.bf.size());

    const std::string file = s.city + ".bin";
    std::ofstream out(fs::path(path) / file, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write " + file);
    out.write(blob.data(), (std::streamsize)blob.size());

    cities.push_back({{"id", s.city},
                      {"year", s.year},
                      {"rows", s.grid.rows},
                      {"cols", s.grid.cols},
                      {"x0", s.grid.x0},
                      {"y0", s.grid.y0},
                      {"file", file},
                      {"arrays", arrays},
                      {"checksum_fnv1a64", diff::fnv1a64(blob.data(), blob.size())}});
  }
  nlohmann::json manifest = {{"format", "geoformer-container-v1"},
                             {"cell_size_m", 100.0},
                             {"dtype", "float32"},
                             {"channels", std::vector<std::string>(kChannelNames.begin(),
                                                                   kChannelNames.end())},
                             {"cities", cities}};
  std::ofstream mf(fs::path(path) / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << '\n';
  write_samples_csv((fs::path(path) / "samples.csv").string(), samples);
}

Container read_container(const std::string& path) {
  std::ifstream mf(fs::path(path) / "manifest.json");
  if (!mf) throw data_error("container: missing manifest.json in " + path);
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("container: invalid manifest.json: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "geoformer-container-v1")
    throw data_error("container: unknown format");
  const auto declared = manifest.at("channels").get<std::vector<std::string>>();

  Container c;
  for (const auto& jc : manifest.at("cities")) {
    CityStack s;
    s.city = jc.at("id").get<std::string>();
    s.year = jc.value("year", 0);
    s.grid.rows = jc.at("rows").get<size_t>();
    s.grid.cols = jc.at("cols").get<size_t>();
    s.grid.x0 = jc.value("x0", 0.0);
    s.grid.y0 = jc.value("y0", 0.0);
    s.grid.cell = manifest.value("cell_size_m", 100.0);

    std::ifstream in(fs::path(path) / jc.at("file").get<std::string>(), std::ios::binary);
    if (!in) throw data_error("container: missing blob for city " + s.city);
    std::vector<char> blob((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    const uint64_t want = jc.at("checksum_fnv1a64").get<uint64_t>();
    if (diff::fnv1a64(blob.data(), blob.size()) != want)
      throw data_error("container: checksum mismatch for city " + s.city);

    const auto& arrays = jc.at("arrays");
    const size_t px = s.px_rows() * s.px_cols();
    for (const std::string& name : declared)
      s.channels[channel_index(name)] = take_array(blob, arrays, name, px, s.city);
    s.bh = take_array(blob, arrays, "BH", s.rows() * s.cols(), s.city);
    s.bf = take_array(blob, arrays, "BF", s.rows() * s.cols(), s.city);
    s.valid.assign(s.rows() * s.cols(), 0);
    c.stacks.push_back(std::move(s));
  }

  c.samples = read_samples_csv((fs::path(path) / "samples.csv").string());
  for (const Sample& smp : c.samples)
    for (CityStack& s : c.stacks)
      if (s.city == smp.city) {
        if (smp.row >= s.rows() || smp.col >= s.cols())
          throw data_error("container: sample outside grid in city " + s.city);
        if (smp.split != Split::purged) s.valid[smp.row * s.cols() + smp.col] = 1;
      }
  for (const CityStack& s : c.stacks) s.validate();
  return c;
}

const CityStack& Container::stack(const std::string& city) const {
  for (const CityStack& s : stacks)
    if (s.city == city) return s;
  throw data_error("container: no such city: " + city);
}

void write_samples_csv(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write " + path);
  out << "city,row,col,h_ave,lambda_p,split\n";
  char buf[160];
  for (const Sample& s : samples) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%.17g,%.17g,%s\n", s.city.c_str(), s.row,
                  s.col, s.h_ave, s.lambda_p, split_name(s.split));
    out << buf;
  }
}

std::vector<Sample> read_samples_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open " + path);
  std::string line;
  std::getline(in, line);  // header
  std::vector<Sample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    Sample s;
    std::getline(ss, s.city, ',');
    std::getline(ss, field, ',');
    s.row = std::stoull(field);
    std::getline(ss, field, ',');
    s.col = std::stoull(field);
    std::getline(ss, field, ',');
    s.h_ave = std::stod(field);
    std::getline(ss, field, ',');
    s.lambda_p = std::stod(field);
    std::getline(ss, field, ',');
    s.split = split_from_name(field);
    out.push_back(std::move(s));
  }
  return out;
}

// ----- context assembly ----------------------------------------------------

NormStats compute_norm_stats(const std::vector<CityStack>& stacks,
                             const std::vector<Sample>& samples) {
  NormStats st;
  std::array<double, kNumChannels> sum{}, sumsq{};
  size_t n = 0;
  for (const Sample& smp : samples) {
    if (smp.split != Split::train) continue;
    const CityStack* stack = nullptr;
    for (const CityStack& s : stacks)
      if (s.city == smp.city) stack = &s;
    if (!stack) throw data_error("norm stats: sample references unknown city " + smp.city);
    const size_t pr0 = smp.row * kPatchPx, pc0 = smp.col * kPatchPx;
    for (size_t c = 0; c < kNumChannels; ++c)
      for (size_t y = 0; y < kPatchPx; ++y)
        for (size_t x = 0; x < kPatchPx; ++x) {
          const double v = stack->channels[c][(pr0 + y) * stack->px_cols() + pc0 + x];
          sum[c] += v;
          sumsq[c] += v * v;
        }
    n += kPatchPx * kPatchPx;
  }
  if (n == 0) throw data_error("norm stats: no training samples");
  for (size_t c = 0; c < kNumChannels; ++c) {
    st.mean[c] = sum[c] / n;
    const double var = sumsq[c] / n - st.mean[c] * st.mean[c];
    st.stdev[c] = std::sqrt(std::max(var, 0.0));
    if (!(st.stdev[c] > 0.0))
      throw data_error(std::string("norm stats: zero variance in channel ") + kChannelNames[c]);
  }
  return st;
}

ContextTensor assemble_context(const CityStack& stack, const Sample& sample, size_t k,
                               const NormStats& stats,
                               const std::array<bool, kNumChannels>& channel_mask) {
  if (k % 2 == 0) throw usage_error("assemble_context: k must be odd, got " + std::to_string(k));
  if (sample.row >= stack.rows() || sample.col >= stack.cols())
    throw usage_error("assemble_context: sample off-grid");

  const size_t side = kPatchPx * k;
  ContextTensor ct;
  ct.k = k;
  ct.row = sample.row;
  ct.col = sample.col;
  ct.data = diff::Tensor({kNumChannels + 1, side, side});

  const long half = (long)k / 2;
  for (long dr = -half; dr <= half; ++dr)
    for (long dc = -half; dc <= half; ++dc) {
      const long r = (long)sample.row + dr;
      const long c = (long)sample.col + dc;
      const size_t oy = (size_t)(dr + half) * kPatchPx;
      const size_t ox = (size_t)(dc + half) * kPatchPx;
      const bool on_grid = r >= 0 && c >= 0 && r < (long)stack.rows() && c < (long)stack.cols();
      if (!on_grid) continue;  // zero padding stands
      for (size_t ch = 0; ch < kNumChannels; ++ch) {
        if (!channel_mask[ch]) continue;
        for (size_t y = 0; y < kPatchPx; ++y)
          for (size_t x = 0; x < kPatchPx; ++x) {
            const double raw =
                stack.channels[ch][((size_t)r * kPatchPx + y) * stack.px_cols() +
                                   (size_t)c * kPatchPx + x];
            ct.data.at({ch, oy + y, ox + x}) = (raw - stats.mean[ch]) / stats.stdev[ch];
          }
      }
    }
  // mask channel: 1 exactly on the central patch
  const size_t m0 = (size_t)half * kPatchPx;
  for (size_t y = 0; y < kPatchPx; ++y)
    for (size_t x = 0; x < kPatchPx; ++x)
      ct.data.at({kNumChannels, m0 + y, m0 + x}) = 1.0;
  return ct;
}

// ----- synthetic generator -------------------------------------------------

uint64_t derive_seed(uint64_t master, const std::string& purpose) {
  uint64_t h = diff::fnv1a64(purpose.data(), purpose.size(), master ^ 0x9e3779b97f4a7c15ull);
  // splitmix finalizer
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return h;
}

SynthCity synth_city(uint64_t seed, size_t rows, size_t cols, const SynthParams& p) {
  if (rows < 16 || cols < 16)
    throw usage_error("synth_city: rows and cols must be >= 16");
  if (p.core_bh <= 0 || p.core_bf <= 0 || p.optical_noise <= 0 || p.sar_noise <= 0 ||
      p.label_noise_bh < 0)
    throw usage_error("synth_city: degenerate parameters");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // latent urbanization field, exposed (noisily) by the optical channels
  std::vector<double> u(rows * cols);
  for (double& v : u) v = uni(rng);

  auto mean3x3 = [&](long r, long c) {
    double s = 0.0;
    size_t n = 0;
    for (long dr = -1; dr <= 1; ++dr)
      for (long dc = -1; dc <= 1; ++dc) {
        const long rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= (long)rows || cc >= (long)cols) continue;
        s += u[(size_t)rr * cols + (size_t)cc];
        ++n;
      }
    return s / (double)n;
  };

  SynthCity out;
  CityStack& s = out.stack;
  s.city = "synth";
  s.year = 2021;
  s.grid = grid::FishnetGrid{0.0, 0.0, 100.0, rows, cols};
  for (auto& ch : s.channels) ch.assign(rows * kPatchPx * cols * kPatchPx, 0.0f);
  s.bh.assign(rows * cols, 0.0f);
  s.bf.assign(rows * cols, 0.0f);
  s.valid.assign(rows * cols, 0);
  out.center_row = rows / 2;
  out.center_col = cols / 2;

  out.labels.rows = rows;
  out.labels.cols = cols;
  out.labels.cells.resize(rows * cols);

  const double fy = 1.0 + 2.0 * uni(rng), fx = 1.0 + 2.0 * uni(rng);
  const double py = 6.2831853 * uni(rng), px = 6.2831853 * uni(rng);

  const size_t pxc = cols * kPatchPx;
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < cols; ++c) {
      const double d = 100.0 * std::hypot((double)r - (double)out.center_row,
                                          (double)c - (double)out.center_col);
      const double radial = std::exp(-d / p.decay_m);
      const double m = mean3x3((long)r, (long)c);
      const double shape = radial * (0.5 + m);

      double bh = p.core_bh * shape + p.label_noise_bh * gauss(rng);
      double bf = p.core_bf * shape + p.label_noise_bf * gauss(rng);
      bh = std::clamp(bh, 2.2, 450.0);
      bf = std::clamp(bf, 0.011, 0.95);

      const size_t ci = r * cols + c;
      s.bh[ci] = (float)bh;
      s.bf[ci] = (float)bf;
      grid::CellLabel& cl = out.labels.cells[ci];
      cl.row = r;
      cl.col = c;
      cl.h_ave = bh;
      cl.lambda_p = bf;
      cl.n_buildings = 1;

      // per-cell channel baselines
      const double uc = u[ci];
      const double sar_sig = bh * bf / (p.core_bh * p.core_bf);  // double-bounce proxy
      std::array<double, kNumChannels> base{};
      base[0] = 0.3 + 0.7 * sar_sig;  // VV
      base[1] = 0.2 + 0.5 * sar_sig;  // VH
      base[2] = 0.15 + 0.8 * uc;      // B2
      base[3] = 0.20 + 0.7 * uc;      // B3
      base[4] = 0.25 + 0.9 * uc;      // B4
      base[5] = 0.30 + 0.6 * uc;      // B8
      const double dem = p.dem_base +
                         p.dem_amp * std::sin(fy * 6.2831853 * (double)r / rows + py) *
                             std::cos(fx * 6.2831853 * (double)c / cols + px);
      base[6] = dem;

      for (size_t y = 0; y < kPatchPx; ++y)
        for (size_t x = 0; x < kPatchPx; ++x) {
          const size_t pi = (r * kPatchPx + y) * pxc + c * kPatchPx + x;
          s.channels[0][pi] = (float)(base[0] + p.sar_noise * gauss(rng));
          s.channels[1][pi] = (float)(base[1] + p.sar_noise * gauss(rng));
          s.channels[2][pi] = (float)(base[2] + p.optical_noise * gauss(rng));
          s.channels[3][pi] = (float)(base[3] + p.optical_noise * gauss(rng));
          s.channels[4][pi] = (float)(base[4] + p.optical_noise * gauss(rng));
          s.channels[5][pi] = (float)(base[5] + p.optical_noise * gauss(rng));
          s.channels[6][pi] = (float)(base[6] + 0.5 * gauss(rng));
        }
    }

  for (size_t i = 0; i < rows * cols; ++i)
    s.valid[i] =
        grid::filter_cell(s.bh[i], s.bf[i]) == grid::FilterReason::kept ? 1 : 0;
  return out;
}

std::vector<Sample> samples_from_labels(const CityStack& stack, const grid::LabelGrid& labels) {
  std::vector<Sample> out;
  for (const grid::CellLabel& cl : labels.cells) {
    if (cl.n_buildings == 0) continue;
    if (grid::filter_cell(cl.h_ave, cl.lambda_p) != grid::FilterReason::kept) continue;
    Sample s;
    s.city = stack.city;
    s.row = cl.row;
    s.col = cl.col;
    s.h_ave = cl.h_ave;
    s.lambda_p = cl.lambda_p;
    s.split = Split::train;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace geoformer::data
