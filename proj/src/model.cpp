#include "geoformer/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "geoformer/errors.hpp"

namespace geoformer::model {

using diff::Tape;
using diff::Tensor;
using diff::Var;

const char* variant_name(Variant v) {
  return v == Variant::geoformer ? "geoformer" : "cnn_baseline";
}

Variant variant_from_name(const std::string& s) {
  if (s == "geoformer") return Variant::geoformer;
  if (s == "cnn_baseline") return Variant::cnn_baseline;
  throw usage_error("unknown model variant: " + s);
}

size_t ModelConfig::default_window(size_t k) {
  for (size_t w = std::min<size_t>(k, 5); w >= 1; --w)
    if (k % w == 0) return w;
  return 1;
}

void ModelConfig::validate() const {
  if (k % 2 == 0) throw usage_error("config: k must be odd");
  if (patch_px != data::kPatchPx) throw usage_error("config: patch_px must be 10");
  if (in_channels != data::kNumChannels + 1)
    throw usage_error("config: in_channels must be 8 (7 data + mask)");
  if (variant == Variant::geoformer) {
    if (dim() % n_heads != 0) throw usage_error("config: embed_dim must be divisible by n_heads");
    if (win() > k) throw usage_error("config: window must not exceed k");
    if (k % win() != 0)
      throw usage_error("config: window must tile k exactly (k=" + std::to_string(k) +
                        ", w=" + std::to_string(win()) + ")");
  } else {
    if (k != 1) throw usage_error("config: cnn_baseline accepts k=1 only");
  }
  if (capacity_scale < 1 || mlp_ratio < 1 || head_hidden < 1 || n_blocks < 1 || n_heads < 1)
    throw usage_error("config: degenerate hyperparameters");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"k", k},
          {"patch_px", patch_px},
          {"in_channels", in_channels},
          {"embed_dim", embed_dim},
          {"n_heads", n_heads},
          {"n_blocks", n_blocks},
          {"window", window},
          {"mlp_ratio", mlp_ratio},
          {"head_hidden", head_hidden},
          {"variant", variant_name(variant)},
          {"capacity_scale", capacity_scale}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.k = j.at("k").get<size_t>();
  c.patch_px = j.value("patch_px", (size_t)10);
  c.in_channels = j.value("in_channels", (size_t)8);
  c.embed_dim = j.value("embed_dim", (size_t)32);
  c.n_heads = j.value("n_heads", (size_t)4);
  c.n_blocks = j.value("n_blocks", (size_t)2);
  c.window = j.value("window", ModelConfig::default_window(c.k));
  c.mlp_ratio = j.value("mlp_ratio", (size_t)4);
  c.head_hidden = j.value("head_hidden", (size_t)16);
  c.variant = variant_from_name(j.value("variant", "geoformer"));
  c.capacity_scale = j.value("capacity_scale", (size_t)1);
  return c;
}

uint64_t ModelConfig::hash() const {
  const std::string s = to_json().dump();
  return diff::fnv1a64(s.data(), s.size());
}

// ----- parameters -----------------------------------------------------------

namespace {

void add_weight(ParamMap& pm, std::mt19937_64& rng, const std::string& name,
                std::vector<size_t> shape, double stddev) {
  std::normal_distribution<double> g(0.0, stddev);
  Tensor t(std::move(shape));
  for (size_t i = 0; i < t.numel(); ++i) t[i] = g(rng);
  pm.emplace_back(name, std::move(t));
}

void add_const_param(ParamMap& pm, const std::string& name, std::vector<size_t> shape,
                     double v) {
  pm.emplace_back(name, Tensor::full(std::move(shape), v));
}

void add_heads(ParamMap& pm, std::mt19937_64& rng, size_t in_dim, size_t hidden) {
  for (const char* task : {"bh", "bf"}) {
    const std::string p = std::string("head.") + task;
    add_weight(pm, rng, p + ".w1", {in_dim, hidden}, 0.02);
    add_const_param(pm, p + ".b1", {hidden}, 0.0);
    add_weight(pm, rng, p + ".w2", {hidden, 1}, 0.02);
    add_const_param(pm, p + ".b2", {1}, 0.0);
  }
}

constexpr size_t kCnnWidths[3] = {32, 64, 128};

}  // namespace

ParamMap init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamMap pm;
  std::mt19937_64 rng(seed);
  if (cfg.variant == Variant::geoformer) {
    const size_t D = cfg.dim();
    const size_t P = cfg.in_channels * cfg.patch_px * cfg.patch_px;
    const size_t w = cfg.win();
    const size_t rel = (2 * w - 1) * (2 * w - 1);
    add_weight(pm, rng, "embed.w", {P, D}, 0.02);
    add_const_param(pm, "embed.b", {D}, 0.0);
    for (size_t b = 0; b < cfg.blocks(); ++b)
      for (size_t u = 0; u < 2; ++u) {  // unshifted, shifted
        const std::string p = "blk" + std::to_string(b) + "." + std::to_string(u);
        add_const_param(pm, p + ".ln1.g", {D}, 1.0);
        add_const_param(pm, p + ".ln1.b", {D}, 0.0);
        add_weight(pm, rng, p + ".qkv.w", {D, 3 * D}, 0.02);
        add_const_param(pm, p + ".qkv.b", {3 * D}, 0.0);
        add_const_param(pm, p + ".relpos", {cfg.n_heads, rel}, 0.0);
        add_weight(pm, rng, p + ".proj.w", {D, D}, 0.02);
        add_const_param(pm, p + ".proj.b", {D}, 0.0);
        add_const_param(pm, p + ".ln2.g", {D}, 1.0);
        add_const_param(pm, p + ".ln2.b", {D}, 0.0);
        add_weight(pm, rng, p + ".mlp.w1", {D, cfg.mlp_ratio * D}, 0.02);
        add_const_param(pm, p + ".mlp.b1", {cfg.mlp_ratio * D}, 0.0);
        add_weight(pm, rng, p + ".mlp.w2", {cfg.mlp_ratio * D, D}, 0.02);
        add_const_param(pm, p + ".mlp.b2", {D}, 0.0);
      }
    add_heads(pm, rng, D, cfg.head_hidden);
  } else {
    size_t cin = cfg.in_channels;
    for (size_t i = 0; i < 3; ++i) {
      const std::string p = "conv" + std::to_string(i + 1);
      add_weight(pm, rng, p + ".w", {kCnnWidths[i], cin, 3, 3},
                 std::sqrt(2.0 / (double)(cin * 9)));
      add_const_param(pm, p + ".b", {kCnnWidths[i]}, 0.0);
      cin = kCnnWidths[i];
    }
    add_heads(pm, rng, kCnnWidths[2], cfg.head_hidden);
  }
  return pm;
}

size_t param_count(const ParamMap& params) {
  size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

BoundParams bind_params(Tape& tape, const ParamMap& params, bool trainable) {
  BoundParams bp;
  for (const auto& [name, t] : params) bp.vars.emplace(name, tape.leaf(t, trainable));
  return bp;
}

Var BoundParams::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw data_error("missing model parameter: " + name);
  return it->second;
}

// ----- window bookkeeping ----------------------------------------------------

std::vector<size_t> window_gather_indices(size_t batch, size_t k, size_t w, size_t shift) {
  const size_t nwside = k / w;
  std::vector<size_t> idx;
  idx.reserve(batch * k * k);
  for (size_t b = 0; b < batch; ++b)
    for (size_t wy = 0; wy < nwside; ++wy)
      for (size_t wx = 0; wx < nwside; ++wx)
        for (size_t iy = 0; iy < w; ++iy)
          for (size_t ix = 0; ix < w; ++ix) {
            const size_t r = (wy * w + iy + shift) % k;  // position on original grid
            const size_t c = (wx * w + ix + shift) % k;
            idx.push_back(b * k * k + r * k + c);
          }
  return idx;
}

std::vector<size_t> inverse_permutation(const std::vector<size_t>& perm) {
  std::vector<size_t> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

Tensor shifted_window_mask(size_t k, size_t w, size_t shift) {
  const size_t nwside = k / w;
  const size_t nw = nwside * nwside;
  const size_t tw = w * w;
  // region id per original-grid coordinate, standard three-band partition
  auto band = [&](size_t v) {
    if (v < k - w) return 0;
    if (v < k - shift) return 1;
    return 2;
  };
  Tensor mask({nw, tw, tw});
  for (size_t wy = 0; wy < nwside; ++wy)
    for (size_t wx = 0; wx < nwside; ++wx) {
      const size_t wi = wy * nwside + wx;
      std::vector<int> region(tw);
      for (size_t iy = 0; iy < w; ++iy)
        for (size_t ix = 0; ix < w; ++ix) {
          // region ids live in shifted coordinates: the last `shift` rows and
          // columns of the shifted grid hold the wrapped-around content
          region[iy * w + ix] = band(wy * w + iy) * 3 + band(wx * w + ix);
        }
      for (size_t i = 0; i < tw; ++i)
        for (size_t j = 0; j < tw; ++j)
          mask.at({wi, i, j}) = region[i] == region[j] ? 0.0 : -1e9;
    }
  return mask;
}

// ----- forward ---------------------------------------------------------------

namespace {

Tensor flatten_patches(const ModelConfig& cfg,
                       const std::vector<const data::ContextTensor*>& batch) {
  const size_t k = cfg.k, px = cfg.patch_px, C = cfg.in_channels;
  const size_t T = k * k, P = C * px * px;
  Tensor X({batch.size() * T, P});
  for (size_t b = 0; b < batch.size(); ++b) {
    const data::ContextTensor& ct = *batch[b];
    if (ct.k != k || ct.data.shape() != std::vector<size_t>{C, k * px, k * px})
      throw shape_error("forward: input tensor dims do not match config (k=" +
                        std::to_string(ct.k) + " vs " + std::to_string(k) + ")");
    for (size_t ty = 0; ty < k; ++ty)
      for (size_t tx = 0; tx < k; ++tx) {
        double* row = X.data() + (b * T + ty * k + tx) * P;
        for (size_t c = 0; c < C; ++c)
          for (size_t y = 0; y < px; ++y)
            for (size_t x = 0; x < px; ++x)
              row[(c * px + y) * px + x] = ct.data.at({c, ty * px + y, tx * px + x});
      }
  }
  return X;
}

Var mlp_head(Tape& /*tape*/, const BoundParams& p, const std::string& prefix, Var x) {
  Var h = diff::gelu(diff::add(diff::matmul(x, p.at(prefix + ".w1")), p.at(prefix + ".b1")));
  return diff::add(diff::matmul(h, p.at(prefix + ".w2")), p.at(prefix + ".b2"));
}

Var attention_unit(Tape& tape, const ModelConfig& cfg, const BoundParams& p,
                   const std::string& prefix, Var tokens, size_t batch, bool shifted) {
  using namespace diff;
  const size_t k = cfg.k, w = cfg.win(), D = cfg.dim();
  const size_t T = k * k, tw = w * w;
  const size_t nw = (k / w) * (k / w);
  const size_t G = batch * nw;
  const size_t dh = D / cfg.n_heads;
  const size_t shift = shifted ? cfg.shift() : 0;

  Var y = layernorm_last(tokens, p.at(prefix + ".ln1.g"), p.at(prefix + ".ln1.b"));
  const auto idx = window_gather_indices(batch, k, w, shift);
  Var xw = reshape(gather_rows(y, idx), {G, tw, D});
  Var qkv = add(matmul(xw, p.at(prefix + ".qkv.w")), p.at(prefix + ".qkv.b"));

  // relative-position index map shared by all heads
  std::vector<size_t> rel_idx(tw * tw);
  for (size_t i = 0; i < tw; ++i)
    for (size_t j = 0; j < tw; ++j) {
      const long dy = (long)(i / w) - (long)(j / w) + (long)w - 1;
      const long dx = (long)(i % w) - (long)(j % w) + (long)w - 1;
      rel_idx[i * tw + j] = (size_t)dy * (2 * w - 1) + (size_t)dx;
    }
  const size_t rel_n = (2 * w - 1) * (2 * w - 1);
  Var rel_table = reshape(p.at(prefix + ".relpos"), {cfg.n_heads * rel_n, 1});

  Tensor mask_full;
  if (shifted && shift > 0) {
    const Tensor m = shifted_window_mask(k, w, shift);
    mask_full = Tensor({G, tw, tw});
    for (size_t b = 0; b < batch; ++b)
      std::copy(m.data(), m.data() + m.numel(), mask_full.data() + b * m.numel());
  }

  std::vector<Var> head_outs;
  for (size_t h = 0; h < cfg.n_heads; ++h) {
    Var q = slice_last(qkv, h * dh, dh);
    Var key = slice_last(qkv, D + h * dh, dh);
    Var v = slice_last(qkv, 2 * D + h * dh, dh);
    Var scores = scalar_mul(matmul(q, transpose_last2(key)), 1.0 / std::sqrt((double)dh));
    std::vector<size_t> head_rel(tw * tw);
    for (size_t i = 0; i < tw * tw; ++i) head_rel[i] = h * rel_n + rel_idx[i];
    Var bias = reshape(gather_rows(rel_table, head_rel), {tw, tw});
    scores = add(scores, bias);
    if (shifted && shift > 0) scores = add_const(scores, mask_full);
    Var attn = softmax_last(scores);
    head_outs.push_back(matmul(attn, v));
  }
  Var cat = cfg.n_heads == 1 ? head_outs[0] : concat_last(head_outs);
  Var o = add(matmul(cat, p.at(prefix + ".proj.w")), p.at(prefix + ".proj.b"));
  Var flat = reshape(o, {batch * T, D});
  Var back = gather_rows(flat, inverse_permutation(idx));
  tokens = add(tokens, back);

  Var y2 = layernorm_last(tokens, p.at(prefix + ".ln2.g"), p.at(prefix + ".ln2.b"));
  Var hmid = gelu(add(matmul(y2, p.at(prefix + ".mlp.w1")), p.at(prefix + ".mlp.b1")));
  Var mlp_out = add(matmul(hmid, p.at(prefix + ".mlp.w2")), p.at(prefix + ".mlp.b2"));
  return add(tokens, mlp_out);
}

Predictions geoformer_forward(Tape& tape, const ModelConfig& cfg, const BoundParams& p,
                              const std::vector<const data::ContextTensor*>& batch) {
  using namespace diff;
  const size_t B = batch.size();
  const size_t k = cfg.k, T = k * k, D = cfg.dim();

  Var X = tape.constant(flatten_patches(cfg, batch));
  Var tokens = add(matmul(X, p.at("embed.w")), p.at("embed.b"));  // [B*T, D]

  for (size_t b = 0; b < cfg.blocks(); ++b) {
    const std::string pre = "blk" + std::to_string(b);
    tokens = attention_unit(tape, cfg, p, pre + ".0", tokens, B, false);
    tokens = attention_unit(tape, cfg, p, pre + ".1", tokens, B, true);
  }

  // extract-center; with one token per cell the average pool is the identity
  std::vector<size_t> center_idx(B);
  for (size_t b = 0; b < B; ++b) center_idx[b] = b * T + (k / 2) * k + (k / 2);
  Var center = gather_rows(tokens, center_idx);  // [B, D]
  (void)D;

  Predictions pr;
  pr.bh = reshape(relu(mlp_head(tape, p, "head.bh", center)), {B});
  pr.bf = reshape(sigmoid(mlp_head(tape, p, "head.bf", center)), {B});
  return pr;
}

Predictions cnn_forward(Tape& tape, const ModelConfig& cfg, const BoundParams& p,
                        const std::vector<const data::ContextTensor*>& batch) {
  using namespace diff;
  const size_t B = batch.size();
  const size_t C = cfg.in_channels, px = cfg.patch_px;
  Tensor X({B, C, px, px});
  for (size_t b = 0; b < B; ++b) {
    const data::ContextTensor& ct = *batch[b];
    if (ct.k != 1) throw shape_error("cnn_baseline: k=1 tensors only");
    std::copy(ct.data.data(), ct.data.data() + ct.data.numel(),
              X.data() + b * C * px * px);
  }
  Var x = tape.constant(std::move(X));
  for (size_t i = 0; i < 3; ++i) {
    const std::string pre = "conv" + std::to_string(i + 1);
    x = relu(conv2d(x, p.at(pre + ".w"), p.at(pre + ".b"), 2, 1));
  }
  // x is [B, 128, 2, 2]; global average pool
  const size_t Cb = kCnnWidths[2];
  const size_t hw = x.numel() / (B * Cb);
  Var pooled = reshape(mean_last(reshape(x, {B * Cb, hw})), {B, Cb});

  Predictions pr;
  pr.bh = reshape(relu(mlp_head(tape, p, "head.bh", pooled)), {B});
  pr.bf = reshape(sigmoid(mlp_head(tape, p, "head.bf", pooled)), {B});
  return pr;
}

}  // namespace

Predictions forward_batch(Tape& tape, const ModelConfig& cfg, const BoundParams& params,
                          const std::vector<const data::ContextTensor*>& batch) {
  if (batch.empty()) throw usage_error("forward: empty batch");
  Predictions pr = cfg.variant == Variant::geoformer
                       ? geoformer_forward(tape, cfg, params, batch)
                       : cnn_forward(tape, cfg, params, batch);
  for (size_t i = 0; i < pr.bh.numel(); ++i)
    if (!std::isfinite(pr.bh.value()[i]) || !std::isfinite(pr.bf.value()[i]))
      throw numeric_error("forward: non-finite activation in prediction heads");
  return pr;
}

std::pair<double, double> predict(const ModelConfig& cfg, const ParamMap& params,
                                  const data::ContextTensor& input) {
  Tape tape;
  BoundParams bp = bind_params(tape, params, false);
  Predictions pr = forward_batch(tape, cfg, bp, {&input});
  return {pr.bh.value()[0], pr.bf.value()[0]};
}

void save_model(const std::string& path, const ModelConfig& cfg, const ParamMap& params,
                const nlohmann::json& extra_meta) {
  nlohmann::json meta = extra_meta;
  meta["config"] = cfg.to_json();
  meta["config_hash"] = cfg.hash();
  diff::write_params(path, params, meta);
  std::ofstream side(path + ".config.json", std::ios::trunc);
  side << nlohmann::json({{"config", cfg.to_json()}, {"config_hash", cfg.hash()}}).dump(2)
       << '\n';
}

LoadedModel load_model(const std::string& path) {
  diff::ParamFile pf = diff::read_params(path);
  LoadedModel lm;
  lm.meta = pf.meta;
  lm.config = ModelConfig::from_json(pf.meta.at("config"));
  const uint64_t want = pf.meta.at("config_hash").get<uint64_t>();
  if (lm.config.hash() != want)
    throw usage_error("checkpoint config hash mismatch (file tampered or format drift)");
  lm.params = std::move(pf.tensors);
  return lm;
}

}  // namespace geoformer::model
