#include "geoformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "geoformer/errors.hpp"

namespace geoformer::diff {

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "param file I/O assumes a little-endian host");

std::vector<char> encode_payload(const Tensor& t) {
  if (t.dtype() == Dtype::f64) {
    std::vector<char> buf(t.numel() * sizeof(double));
    std::memcpy(buf.data(), t.data(), buf.size());
    return buf;
  }
  std::vector<char> buf(t.numel() * sizeof(float));
  auto* f = reinterpret_cast<float*>(buf.data());
  for (size_t i = 0; i < t.numel(); ++i) f[i] = static_cast<float>(t[i]);
  return buf;
}

Tensor decode_payload(const std::vector<size_t>& shape, Dtype dtype, const char* bytes,
                      size_t nbytes) {
  const size_t n = Tensor::numel_from_shape(shape);
  const size_t expect = n * (dtype == Dtype::f64 ? sizeof(double) : sizeof(float));
  if (nbytes != expect) throw data_error("param payload size mismatch");
  Tensor t(shape, dtype);
  if (dtype == Dtype::f64) {
    std::memcpy(t.data(), bytes, nbytes);
  } else {
    const auto* f = reinterpret_cast<const float*>(bytes);
    for (size_t i = 0; i < n; ++i) t[i] = static_cast<double>(f[i]);
  }
  return t;
}

}  // namespace

void write_params(const std::string& path, const NamedTensors& tensors,
                  const nlohmann::json& meta) {
  nlohmann::json entries = nlohmann::json::array();
  std::vector<char> payload;
  for (const auto& [name, t] : tensors) {
    std::vector<char> buf = encode_payload(t);
    entries.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", dtype_name(t.dtype())},
                       {"offset", payload.size()},
                       {"nbytes", buf.size()}});
    payload.insert(payload.end(), buf.begin(), buf.end());
  }
  nlohmann::json header = {{"format", "geoformer-params-v1"},
                           {"entries", entries},
                           {"payload_checksum_fnv1a64", fnv1a64(payload.data(), payload.size())},
                           {"meta", meta}};
  const std::string hs = header.dump();
  const uint64_t hlen = hs.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), (std::streamsize)hs.size());
  out.write(payload.data(), (std::streamsize)payload.size());
  if (!out) throw data_error("write failed: " + path);
}

ParamFile read_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1ull << 30)) throw data_error("corrupt header in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), (std::streamsize)hlen);
  if (!in) throw data_error("truncated header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw data_error("invalid header JSON in " + path + ": " + e.what());
  }
  if (header.value("format", "") != "geoformer-params-v1")
    throw data_error("unknown param file format in " + path);

  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  const uint64_t want = header.at("payload_checksum_fnv1a64").get<uint64_t>();
  if (fnv1a64(payload.data(), payload.size()) != want)
    throw data_error("payload checksum mismatch in " + path);

  ParamFile pf;
  pf.meta = header.value("meta", nlohmann::json::object());
  for (const auto& e : header.at("entries")) {
    const std::string name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<size_t>>();
    const std::string dt = e.at("dtype").get<std::string>();
    Dtype dtype;
    if (dt == "float32")
      dtype = Dtype::f32;
    else if (dt == "float64")
      dtype = Dtype::f64;
    else
      throw data_error("unknown dtype '" + dt + "' in " + path);
    const size_t off = e.at("offset").get<size_t>();
    const size_t nbytes = e.at("nbytes").get<size_t>();
    if (off + nbytes > payload.size()) throw data_error("truncated array '" + name + "'");
    pf.tensors.emplace_back(name, decode_payload(shape, dtype, payload.data() + off, nbytes));
  }
  return pf;
}

const Tensor& ParamFile::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw data_error("param '" + name + "' not found in checkpoint");
}

bool ParamFile::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

}  // namespace geoformer::diff
