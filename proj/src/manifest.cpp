#include "ecomp/manifest.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ecomp/cost.hpp"

namespace ecomp {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "payloads are little-endian");

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_num(const json& j, const char* what) {
  if (!j.is_string()) throw ManifestError(std::string("manifest: expected a decimal string for ") + what);
  const std::string s = j.get<std::string>();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ManifestError("manifest: bad number '" + s + "'");
  return v;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw ManifestError("manifest: bad fingerprint '" + s + "'");
  return std::stoull(s, nullptr, 16);
}

json num_array(std::span<const double> v) {
  json a = json::array();
  for (double x : v) a.push_back(fmt(x));
  return a;
}

Vector parse_num_array(const json& j, const char* what) {
  Vector out;
  for (const json& x : j) out.push_back(parse_num(x, what));
  return out;
}

std::string f64_bytes(std::span<const double> v) {
  std::string s(v.size() * sizeof(double), '\0');
  if (!v.empty()) std::memcpy(s.data(), v.data(), s.size());
  return s;
}

std::vector<double> f64_from_bytes(const std::string& s) {
  if (s.size() % sizeof(double) != 0) throw ManifestError("manifest: float64 blob has a ragged length");
  std::vector<double> v(s.size() / sizeof(double));
  if (!v.empty()) std::memcpy(v.data(), s.data(), s.size());
  return v;
}

json blob(std::span<const double> v) { return base64_encode(f64_bytes(v)); }

std::vector<double> unblob(const json& j, std::size_t expected, const char* what) {
  std::vector<double> v = f64_from_bytes(base64_decode(j.get<std::string>()));
  if (v.size() != expected) throw ManifestError(std::string("manifest: wrong element count in ") + what);
  return v;
}

json matrix_json(const Matrix& m) { return json{{"rows", m.rows()}, {"cols", m.cols()}, {"f64", blob(m.data())}}; }

Matrix matrix_from(const json& j, const char* what) {
  const std::size_t r = j.at("rows"), c = j.at("cols");
  return Matrix(r, c, unblob(j.at("f64"), r * c, what));
}

json tensor_json(const Tensor4& t) {
  return json{{"dims", {t.c_out(), t.c_in(), t.h(), t.w()}}, {"f64", blob(t.data())}};
}

Tensor4 tensor_from(const json& j) {
  const auto d = j.at("dims").get<std::vector<std::size_t>>();
  if (d.size() != 4) throw ManifestError("manifest: tensor needs four dims");
  Tensor4 t(d[0], d[1], d[2], d[3]);
  const std::vector<double> v = unblob(j.at("f64"), t.size(), "tensor");
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

json norm_json(const FrozenNorm& n) { return json{{"gamma", blob(n.gamma)}, {"beta", blob(n.beta)}}; }

FrozenNorm norm_from(const json& j, std::size_t dim) {
  return {unblob(j.at("gamma"), dim, "norm gamma"), unblob(j.at("beta"), dim, "norm beta")};
}

json profile_json(const Profile& p) {
  json layers = json::array();
  for (const LayerChoice& c : p.layers) layers.push_back({c.k, c.bits.u, c.bits.core, c.bits.v});
  return json{{"id", p.id}, {"layers", layers}};
}

Profile profile_from(const json& j) {
  Profile p;
  p.id = j.at("id");
  for (const json& l : j.at("layers")) {
    if (l.size() != 4) throw ManifestError("manifest: profile layer needs [k, qu, qc, qv]");
    p.layers.push_back({l.at(0).get<std::size_t>(), {l.at(1).get<int>(), l.at(2).get<int>(), l.at(3).get<int>()}});
  }
  return p;
}

json network_json(const Network& net) {
  json blocks = json::array();
  for (const Block& b : net.blocks) {
    const ElasticLayer& L = b.layer;
    json jb{{"name", b.name}, {"kind", to_string(L.kind())}, {"act", to_string(b.act)},
            {"residual", b.residual}, {"k_min", L.k_min()}, {"k_max", L.k_max()}};
    if (L.group_id()) jb["group"] = *L.group_id();
    if (L.bias()) jb["bias"] = blob(*L.bias());
    if (b.norm) jb["norm"] = norm_json(*b.norm);
    if (L.is_conv()) {
      const Tucker2Factors& t = L.tucker();
      jb["factors"] = {{"u_out", matrix_json(t.u_out)}, {"core", tensor_json(t.core)}, {"u_in", matrix_json(t.u_in)}};
    } else {
      jb["factors"] = {{"u", matrix_json(L.u())}, {"sigma", blob(L.sigma())}, {"v", matrix_json(L.v())}};
    }
    blocks.push_back(jb);
  }
  return json{{"height", net.height}, {"width", net.width}, {"blocks", blocks}};
}

Network network_from(const json& j) {
  Network net;
  net.height = j.at("height");
  net.width = j.at("width");
  for (const json& jb : j.at("blocks")) {
    Block b;
    b.name = jb.at("name");
    b.act = activation_from_string(jb.at("act"));
    b.residual = jb.at("residual");
    const LayerKind kind = layer_kind_from_string(jb.at("kind"));
    const json& f = jb.at("factors");
    if (kind == LayerKind::ConvTucker2) {
      b.layer = ElasticLayer::from_factors(
          Tucker2Factors{matrix_from(f.at("u_out"), "u_out"), tensor_from(f.at("core")), matrix_from(f.at("u_in"), "u_in")});
    } else {
      Matrix u = matrix_from(f.at("u"), "u"), v = matrix_from(f.at("v"), "v");
      Vector s = unblob(f.at("sigma"), u.cols(), "sigma");
      b.layer = kind == LayerKind::DenseSvd ? ElasticLayer::from_factors(SvdFactors{u, s, v})
                                            : ElasticLayer::from_factors(CpFactors{u, v, s});
    }
    b.layer.set_rank_range(jb.at("k_min"), jb.at("k_max"));
    if (jb.contains("group")) b.layer.set_group_id(jb.at("group").get<std::string>());
    if (jb.contains("bias")) b.layer.set_bias(unblob(jb.at("bias"), b.layer.out_dim(), "bias"));
    if (jb.contains("norm")) b.norm = norm_from(jb.at("norm"), b.layer.out_dim());
    net.blocks.push_back(std::move(b));
  }
  net.validate();
  return net;
}

json raw_json(const RawBlock& r) {
  json jb{{"name", r.name}, {"kind", to_string(r.kind)}, {"weight", matrix_json(r.weight)},
          {"kh", r.kh}, {"kw", r.kw}, {"act", to_string(r.act)}, {"residual", r.residual}};
  if (r.bias) jb["bias"] = blob(*r.bias);
  if (r.norm) jb["norm"] = norm_json(*r.norm);
  if (r.group) jb["group"] = *r.group;
  return jb;
}

RawBlock raw_from(const json& jb) {
  RawBlock r;
  r.name = jb.at("name");
  r.kind = layer_kind_from_string(jb.at("kind"));
  r.weight = matrix_from(jb.at("weight"), "weight");
  r.kh = jb.at("kh");
  r.kw = jb.at("kw");
  r.act = activation_from_string(jb.at("act"));
  r.residual = jb.at("residual");
  if (jb.contains("bias")) r.bias = unblob(jb.at("bias"), r.weight.rows(), "bias");
  if (jb.contains("norm")) r.norm = norm_from(jb.at("norm"), r.weight.rows());
  if (jb.contains("group")) r.group = jb.at("group").get<std::string>();
  return r;
}

const char* granularity_name(Granularity g) { return g == Granularity::PerTensor ? "tensor" : "channel"; }

Granularity granularity_from(const std::string& s) {
  if (s == "tensor") return Granularity::PerTensor;
  if (s == "channel") return Granularity::PerChannel;
  throw ManifestError("manifest: unknown granularity " + s);
}

json payload_json(const ProfilePayload& p) {
  json layers = json::array();
  for (const LayerPayload& l : p.layers) {
    json fs = json::array();
    for (const FactorPayload& f : l.factors)
      fs.push_back({{"role", f.role}, {"rows", f.rows}, {"cols", f.cols}, {"bits", f.bits},
                    {"granularity", granularity_name(f.granularity)}, {"axis", f.axis},
                    {"scales", num_array(f.scales)}, {"data", base64_encode(f.bytes)}});
    layers.push_back({{"k", l.k}, {"bits", {l.bits.u, l.bits.core, l.bits.v}}, {"factors", fs}});
  }
  return json{{"profile_id", p.profile_id}, {"layers", layers}};
}

ProfilePayload payload_from(const json& j) {
  ProfilePayload p;
  p.profile_id = j.at("profile_id");
  for (const json& jl : j.at("layers")) {
    LayerPayload l;
    l.k = jl.at("k");
    const auto b = jl.at("bits").get<std::vector<int>>();
    if (b.size() != 3) throw ManifestError("manifest: payload bits need three entries");
    l.bits = {b[0], b[1], b[2]};
    for (const json& jf : jl.at("factors")) {
      FactorPayload f;
      f.role = jf.at("role");
      f.rows = jf.at("rows");
      f.cols = jf.at("cols");
      f.bits = jf.at("bits");
      f.granularity = granularity_from(jf.at("granularity"));
      f.axis = jf.at("axis");
      f.scales = parse_num_array(jf.at("scales"), "scale");
      f.bytes = base64_decode(jf.at("data").get<std::string>());
      l.factors.push_back(std::move(f));
    }
    p.layers.push_back(std::move(l));
  }
  return p;
}

bool close(double a, double b, double tol, double* worst) {
  const double err = std::abs(a - b) / std::max(1.0, std::abs(b));
  if (worst) *worst = std::max(*worst, err);
  return err <= tol;
}

Matrix full_dense_weight(const ElasticLayer& L) {
  Matrix us = L.u();
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= L.sigma()[j];
  return matmul_nt(us, L.v());
}

}  // namespace

std::string base64_encode(const std::string& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                       (static_cast<unsigned char>(bytes[i + 1]) << 8) | static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest) {
    unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw ManifestError("base64: length is not a multiple of 4");
  auto val = [](char c) -> int {
    const char* p = std::strchr(kAlphabet, c);
    return c != '\0' && p ? static_cast<int>(p - kAlphabet) : -1;
  };
  std::string out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    const int pad = last ? (text[i + 3] == '=') + (text[i + 2] == '=') : 0;
    if (pad == 1 && text[i + 2] == '=') throw ManifestError("base64: bad padding");
    unsigned v = 0;
    for (int j = 0; j < 4 - pad; ++j) {
      const int d = val(text[i + j]);
      if (d < 0) throw ManifestError("base64: invalid character");
      v |= static_cast<unsigned>(d) << (18 - 6 * j);
    }
    out += static_cast<char>((v >> 16) & 255);
    if (pad < 2) out += static_cast<char>((v >> 8) & 255);
    if (pad < 1) out += static_cast<char>(v & 255);
  }
  return out;
}

std::uint64_t LayerPayload::size() const {
  std::uint64_t s = 0;
  for (const FactorPayload& f : factors) s += f.bytes.size();
  return s;
}

std::uint64_t ProfilePayload::size() const {
  std::uint64_t s = 0;
  for (const LayerPayload& l : layers) s += l.size();
  return s;
}

FactorPayload encode_factor(const std::string& role, const Matrix& values, const std::optional<QuantizedFactor>& q) {
  FactorPayload f;
  f.role = role;
  f.rows = values.rows();
  f.cols = values.cols();
  if (!q) {
    f.bytes = f64_bytes(values.data());
    return f;
  }
  if (q->rows != f.rows || q->cols != f.cols) throw ManifestError("payload: code shape mismatch");
  f.bits = q->spec.bits;
  f.granularity = q->spec.granularity;
  f.axis = q->spec.axis;
  f.scales = q->spec.scales;
  const int top = q->spec.max_code();
  const std::uint64_t nbits = static_cast<std::uint64_t>(q->codes.size()) * static_cast<std::uint64_t>(f.bits);
  f.bytes.assign((nbits + 7) / 8, '\0');
  std::uint64_t pos = 0;
  for (std::int32_t c : q->codes) {
    const std::uint32_t u = static_cast<std::uint32_t>(c + top);
    for (int b = 0; b < f.bits; ++b, ++pos)
      if ((u >> b) & 1u) f.bytes[pos / 8] = static_cast<char>(f.bytes[pos / 8] | (1 << (pos % 8)));
  }
  return f;
}

Matrix decode_factor(const FactorPayload& f) {
  const std::uint64_t count = static_cast<std::uint64_t>(f.rows) * f.cols;
  if (f.bytes.size() != tensor_bytes(count, f.bits)) throw ManifestError("payload: byte count mismatch for " + f.role);
  if (f.bits <= 0) return Matrix(f.rows, f.cols, f64_from_bytes(f.bytes));
  QuantizedFactor q;
  q.spec.bits = f.bits;
  q.spec.granularity = f.granularity;
  q.spec.axis = f.axis;
  q.spec.scales = f.scales;
  q.rows = f.rows;
  q.cols = f.cols;
  const int top = q.spec.max_code();
  std::uint64_t pos = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < f.bits; ++b, ++pos)
      if ((static_cast<unsigned char>(f.bytes[pos / 8]) >> (pos % 8)) & 1u) u |= 1u << b;
    if (u > static_cast<std::uint32_t>(2 * top)) throw ManifestError("payload: code out of range");
    q.codes.push_back(static_cast<std::int32_t>(u) - top);
  }
  return dequantize(q);
}

ProfilePayload make_payload(const Network& net, const Profile& p) {
  validate_profile(net, p);
  ProfilePayload out;
  out.profile_id = device_profile_id(p);
  for (std::size_t l = 0; l < net.blocks.size(); ++l) {
    const LayerChoice& c = p.layers[l];
    const LayerOp op = materialize(net.blocks[l].layer, c.k, c.bits);
    LayerPayload lp;
    lp.k = c.k;
    lp.bits = c.bits;
    lp.factors.push_back(encode_factor("u", op.u, op.qu));
    if (op.kind == LayerKind::ConvTucker2)
      lp.factors.push_back(encode_factor("core", op.core.unfold_out(), op.qcore));
    else
      lp.factors.push_back(encode_factor("core", Matrix(1, op.sigma.size(), op.sigma), op.qcore));
    lp.factors.push_back(encode_factor("v", op.v, op.qv));
    out.layers.push_back(std::move(lp));
  }
  return out;
}

std::string manifest_to_string(const Manifest& m) {
  json j;
  j["format"] = "ecomp-manifest";
  j["version"] = m.version;
  j["height"] = m.height;
  j["width"] = m.width;
  if (!m.raw.empty()) {
    json raw = json::array();
    for (const RawBlock& r : m.raw) raw.push_back(raw_json(r));
    j["raw"] = raw;
  }
  if (m.net) {
    j["network"] = network_json(*m.net);
    j["fingerprint"] = hex64(fingerprint(*m.net));
  }
  if (m.calibration) {
    const CalibrationStats& c = *m.calibration;
    j["calibration"] = {{"alpha", num_array(c.alpha)}, {"running_max", num_array(c.running_max)},
                        {"samples", c.samples}, {"fingerprint", hex64(c.fingerprint)}};
  }
  json profiles = json::array();
  for (const Profile& p : m.profiles) profiles.push_back(profile_json(p));
  j["profiles"] = profiles;
  json ledgers = json::array();
  for (const CertificateLedger& l : m.ledgers) {
    json layers = json::array();
    for (const LedgerEntry& e : l.layers)
      layers.push_back({{"lhat", fmt(e.lhat)}, {"residual", fmt(e.residual)}, {"alpha", fmt(e.alpha)}});
    ledgers.push_back({{"profile_id", l.profile_id}, {"mode", to_string(l.mode)}, {"certified", l.certified},
                       {"delta_hat", fmt(l.delta_hat)}, {"layers", layers}});
  }
  j["ledgers"] = ledgers;
  if (m.lattice) {
    json entries = json::array();
    for (const LatticeEntry& e : m.lattice->entries) {
      json je{{"profile", profile_json(e.profile)}, {"latency_ms", fmt(e.latency_ms)}, {"bytes", e.bytes},
              {"delta_hat", fmt(e.delta_hat)}};
      if (e.energy_mj) je["energy_mj"] = fmt(*e.energy_mj);
      if (e.measured_latency_ms) je["measured_latency_ms"] = fmt(*e.measured_latency_ms);
      entries.push_back(je);
    }
    j["lattice"] = {{"device_id", m.lattice->device_id}, {"entries", entries}};
  }
  json payloads = json::array();
  for (const ProfilePayload& p : m.payloads) payloads.push_back(payload_json(p));
  j["payloads"] = payloads;
  j["provenance"] = {{"seed", m.provenance.seed}, {"config_hash", m.provenance.config_hash},
                     {"command", m.provenance.command}};
  return j.dump(1) + "\n";
}

Manifest manifest_from_string(const std::string& text) {
  Manifest m;
  try {
    const json j = json::parse(text);
    if (j.at("format") != "ecomp-manifest") throw ManifestError("manifest: unknown format");
    m.version = j.at("version");
    if (m.version != kManifestVersion) throw ManifestError("manifest: unsupported version " + std::to_string(m.version));
    m.height = j.at("height");
    m.width = j.at("width");
    if (j.contains("raw"))
      for (const json& r : j.at("raw")) m.raw.push_back(raw_from(r));
    if (j.contains("network")) {
      m.net = network_from(j.at("network"));
      if (parse_hex64(j.at("fingerprint")) != fingerprint(*m.net))
        throw ManifestError("manifest: fingerprint does not match the stored parameters");
    }
    if (j.contains("calibration")) {
      const json& c = j.at("calibration");
      m.calibration = CalibrationStats{parse_num_array(c.at("alpha"), "alpha"),
                                       parse_num_array(c.at("running_max"), "running_max"), c.at("samples"),
                                       parse_hex64(c.at("fingerprint"))};
    }
    for (const json& p : j.at("profiles")) m.profiles.push_back(profile_from(p));
    for (const json& jl : j.at("ledgers")) {
      CertificateLedger l;
      l.profile_id = jl.at("profile_id");
      l.mode = proxy_mode_from_string(jl.at("mode"));
      l.certified = jl.at("certified");
      l.delta_hat = parse_num(jl.at("delta_hat"), "delta_hat");
      for (const json& e : jl.at("layers"))
        l.layers.push_back({parse_num(e.at("lhat"), "lhat"), parse_num(e.at("residual"), "residual"),
                            parse_num(e.at("alpha"), "alpha")});
      m.ledgers.push_back(std::move(l));
    }
    if (j.contains("lattice")) {
      ProfileLattice lat;
      lat.device_id = j.at("lattice").at("device_id");
      for (const json& je : j.at("lattice").at("entries")) {
        LatticeEntry e;
        e.profile = profile_from(je.at("profile"));
        e.latency_ms = parse_num(je.at("latency_ms"), "latency_ms");
        e.bytes = je.at("bytes");
        e.delta_hat = parse_num(je.at("delta_hat"), "delta_hat");
        if (je.contains("energy_mj")) e.energy_mj = parse_num(je.at("energy_mj"), "energy_mj");
        if (je.contains("measured_latency_ms"))
          e.measured_latency_ms = parse_num(je.at("measured_latency_ms"), "measured_latency_ms");
        lat.entries.push_back(std::move(e));
      }
      m.lattice = std::move(lat);
    }
    for (const json& p : j.at("payloads")) m.payloads.push_back(payload_from(p));
    const json& pv = j.at("provenance");
    m.provenance = {pv.at("seed"), pv.at("config_hash"), pv.at("command")};
  } catch (const json::exception& e) {
    throw ManifestError(std::string("manifest: ") + e.what());
  } catch (const LinalgError& e) {
    throw ManifestError(std::string("manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ManifestError(std::string("manifest: ") + e.what());
  }
  return m;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ManifestError("cannot open " + tmp + " for writing");
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    os.flush();
    if (!os) throw ManifestError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ManifestError("cannot rename onto " + path);
  }
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ManifestError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_manifest(const std::string& path, const Manifest& m) { write_text_atomic(path, manifest_to_string(m)); }

Manifest read_manifest(const std::string& path) { return manifest_from_string(read_text(path)); }

Manifest raw_manifest(const Network& net) {
  Manifest m;
  m.height = net.height;
  m.width = net.width;
  for (const Block& b : net.blocks) {
    const ElasticLayer& L = b.layer;
    RawBlock r;
    r.name = b.name;
    r.kind = L.kind();
    r.weight = L.is_conv() ? L.tucker().reconstruct().unfold_out() : full_dense_weight(L);
    r.kh = L.kernel_h();
    r.kw = L.kernel_w();
    r.bias = L.bias();
    r.act = b.act;
    r.norm = b.norm;
    r.residual = b.residual;
    r.group = L.group_id();
    m.raw.push_back(std::move(r));
  }
  return m;
}

DecomposeResult decompose(const Manifest& raw, std::optional<std::size_t> k_max, const std::vector<LayerKind>& kinds) {
  if (raw.raw.empty()) throw ManifestError("decompose: manifest has no raw weights");
  if (!kinds.empty() && kinds.size() != raw.raw.size()) throw ManifestError("decompose: one kind per layer expected");
  if (k_max && *k_max == 0) throw ManifestError("decompose: k_max must be positive");
  DecomposeResult out;
  out.net.height = raw.height;
  out.net.width = raw.width;
  for (std::size_t l = 0; l < raw.raw.size(); ++l) {
    const RawBlock& r = raw.raw[l];
    const LayerKind kind = kinds.empty() ? r.kind : kinds[l];
    require_finite(r.weight.data(), "decompose: weight " + r.name);
    Block b;
    b.name = r.name;
    double err = 0.0, ref = 0.0;
    if (r.kh * r.kw > 1 || kind == LayerKind::ConvTucker2) {
      if (kind != LayerKind::ConvTucker2) throw ManifestError("decompose: conv layer " + r.name + " needs tucker2");
      if (r.weight.cols() % (r.kh * r.kw) != 0) throw ManifestError("decompose: bad conv unfolding in " + r.name);
      const Tensor4 w = Tensor4::fold_out(r.weight, r.weight.cols() / (r.kh * r.kw), r.kh, r.kw);
      b.layer = ElasticLayer::conv(w);
      err = frobenius_norm(b.layer.tucker().reconstruct() - w);
      ref = frobenius_norm(w);
    } else {
      b.layer = ElasticLayer::dense(r.weight, kind);
      err = frobenius_norm(full_dense_weight(b.layer) - r.weight);
      ref = frobenius_norm(r.weight);
    }
    out.relative_error.push_back(ref > 0.0 ? err / ref : err);
    if (k_max) b.layer.set_rank_range(1, std::min(*k_max, b.layer.k_max()));
    b.layer.set_group_id(r.group);
    b.layer.set_bias(r.bias);
    b.act = r.act;
    b.norm = r.norm;
    b.residual = r.residual;
    out.net.blocks.push_back(std::move(b));
  }
  out.net.validate();
  return out;
}

const Profile* find_profile(const Manifest& m, const std::string& id) {
  for (const Profile& p : m.profiles)
    if (p.id == id) return &p;
  if (m.lattice)
    for (const LatticeEntry& e : m.lattice->entries)
      if (e.profile.id == id) return &e.profile;
  return nullptr;
}

const CertificateLedger* find_ledger(const Manifest& m, const std::string& id) {
  for (const CertificateLedger& l : m.ledgers)
    if (l.profile_id == id) return &l;
  return nullptr;
}

std::vector<Profile> conservative_tail_profiles(const Manifest& m) {
  std::vector<Profile> out;
  for (const CertificateLedger& l : m.ledgers)
    if (l.mode == ProxyMode::Conservative)
      if (const Profile* p = find_profile(m, l.profile_id)) out.push_back(*p);
  return out;
}

ManifestCheck verify_manifest(const Manifest& m, double tol) {
  ManifestCheck chk;
  auto problem = [&](const std::string& s) { chk.problems.push_back(s); };
  if (!m.net) {
    if (m.raw.empty()) problem("manifest holds neither raw weights nor a network");
    if (!m.ledgers.empty() || m.lattice || !m.payloads.empty()) problem("ledgers or payloads without a network");
    return chk;
  }
  const Network& net = *m.net;
  const std::uint64_t fp = fingerprint(net);
  if (m.calibration) {
    if (m.calibration->fingerprint != fp) problem("calibration fingerprint is stale");
    if (m.calibration->alpha.size() != net.blocks.size()) problem("calibration has the wrong layer count");
  }

  std::set<std::string> ids;
  for (const Profile& p : m.profiles) {
    if (p.id.empty() || !ids.insert(p.id).second) problem("profile ids must be unique and non-empty");
    try {
      validate_profile(net, p);
    } catch (const std::exception& e) {
      problem("profile " + p.id + ": " + e.what());
    }
  }

  const std::vector<Profile> tails = conservative_tail_profiles(m);
  Vector cons_lhat;
  for (std::size_t l = 0; l < net.blocks.size(); ++l) cons_lhat.push_back(exact_postlayer_lipschitz(net, l, tails));
  for (const CertificateLedger& led : m.ledgers) {
    ++chk.ledgers_checked;
    const Profile* p = find_profile(m, led.profile_id);
    if (!p) {
      problem("ledger " + led.profile_id + " has no profile");
      continue;
    }
    if (led.layers.size() != net.blocks.size()) {
      problem("ledger " + led.profile_id + " has the wrong layer count");
      continue;
    }
    if (led.certified != (led.mode == ProxyMode::Conservative)) problem("ledger " + led.profile_id + " certified flag");
    if (!m.calibration) {
      problem("ledger " + led.profile_id + " without calibration");
      continue;
    }
    const Vector res = residual_norms(net, *p);
    double sum = 0.0;
    for (std::size_t l = 0; l < net.blocks.size(); ++l) {
      const LedgerEntry& e = led.layers[l];
      if (!close(e.residual, res[l], tol, &chk.max_ledger_error))
        problem("ledger " + led.profile_id + " residual mismatch at layer " + std::to_string(l));
      if (!close(e.alpha, m.calibration->alpha[l], tol, &chk.max_ledger_error))
        problem("ledger " + led.profile_id + " alpha mismatch at layer " + std::to_string(l));
      if (led.mode == ProxyMode::Conservative && !close(e.lhat, cons_lhat[l], tol, &chk.max_ledger_error))
        problem("ledger " + led.profile_id + " Lipschitz mismatch at layer " + std::to_string(l));
      if (!(e.lhat >= 0.0) || !std::isfinite(e.lhat)) problem("ledger " + led.profile_id + " bad Lipschitz value");
      sum += e.lhat * res[l] * m.calibration->alpha[l];
    }
    if (!close(led.delta_hat, sum, tol, &chk.max_ledger_error))
      problem("ledger " + led.profile_id + " aggregate mismatch");
  }

  if (m.lattice) {
    std::set<std::string> lat_ids;
    for (const LatticeEntry& e : m.lattice->entries) {
      const std::string& id = e.profile.id;
      if (id.empty() || !lat_ids.insert(id).second) problem("lattice ids must be unique and non-empty");
      try {
        validate_profile(net, e.profile);
        if (e.bytes != profile_cost(net, e.profile).total_weight_bytes()) problem("lattice " + id + " bytes mismatch");
      } catch (const std::exception& ex) {
        problem("lattice " + id + ": " + ex.what());
        continue;
      }
      const CertificateLedger* led = find_ledger(m, id);
      if (!led)
        problem("lattice " + id + " has no ledger");
      else if (!close(e.delta_hat, led->delta_hat, tol, &chk.max_ledger_error))
        problem("lattice " + id + " delta_hat differs from its ledger");
      const bool has_payload = std::any_of(m.payloads.begin(), m.payloads.end(),
                                           [&](const ProfilePayload& p) { return p.profile_id == id; });
      if (!has_payload) problem("lattice " + id + " has no payload");
    }
    if (!m.lattice->totally_ordered()) problem("lattice is not totally ordered");
  }

  for (const ProfilePayload& pay : m.payloads) {
    ++chk.payloads_checked;
    const Profile* p = find_profile(m, pay.profile_id);
    if (!p) {
      problem("payload " + pay.profile_id + " has no profile");
      continue;
    }
    if (pay.layers.size() != net.blocks.size()) {
      problem("payload " + pay.profile_id + " has the wrong layer count");
      continue;
    }
    for (std::size_t l = 0; l < net.blocks.size(); ++l) {
      const LayerPayload& lp = pay.layers[l];
      const LayerChoice& c = p->layers[l];
      const std::string where = "payload " + pay.profile_id + " layer " + std::to_string(l);
      if (lp.k != c.k || !(lp.bits == c.bits)) {
        problem(where + " disagrees with its profile");
        continue;
      }
      if (lp.size() != bytes_of(net.blocks[l].layer, c.k, c.bits)) problem(where + " size differs from bytes_of");
      try {
        const LayerOp op = materialize(net.blocks[l].layer, c.k, c.bits);
        const Matrix core = op.kind == LayerKind::ConvTucker2 ? op.core.unfold_out()
                                                              : Matrix(1, op.sigma.size(), op.sigma);
        const Matrix* want[3] = {&op.u, &core, &op.v};
        if (lp.factors.size() != 3) throw ManifestError("three factors expected");
        for (std::size_t f = 0; f < 3; ++f)
          if (!(decode_factor(lp.factors[f]) == *want[f])) problem(where + " factor " + lp.factors[f].role + " differs");
      } catch (const std::exception& e) {
        problem(where + ": " + e.what());
      }
    }
  }
  return chk;
}

void write_dataset_csv(std::ostream& os, const Dataset& d) {
  if (!d.y.empty() && d.y.size() != d.x.size()) throw ManifestError("dataset: label count mismatch");
  const std::size_t dim = d.x.empty() ? 0 : d.x.front().size();
  for (std::size_t j = 0; j < dim; ++j) os << (j ? "," : "") << 'x' << j;
  if (!d.y.empty()) os << ",label";
  os << '\n';
  for (std::size_t i = 0; i < d.x.size(); ++i) {
    if (d.x[i].size() != dim) throw ManifestError("dataset: ragged rows");
    for (std::size_t j = 0; j < dim; ++j) os << (j ? "," : "") << fmt(d.x[i][j]);
    if (!d.y.empty()) os << ',' << d.y[i];
    os << '\n';
  }
}

Dataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.empty()) throw ManifestError("dataset: missing header");
  std::vector<std::string> head;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) head.push_back(cell);
  }
  const bool labelled = !head.empty() && head.back() == "label";
  const std::size_t dim = head.size() - (labelled ? 1 : 0);
  for (std::size_t j = 0; j < dim; ++j)
    if (head[j] != "x" + std::to_string(j)) throw ManifestError("dataset: unexpected column " + head[j]);
  Dataset d;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Vector x;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != head.size()) throw ManifestError("dataset: wrong field count on row " + std::to_string(row));
    for (std::size_t j = 0; j < dim; ++j) x.push_back(parse_num(json(cells[j]), "feature"));
    if (labelled) {
      char* end = nullptr;
      const unsigned long v = std::strtoul(cells.back().c_str(), &end, 10);
      if (cells.back().empty() || *end != '\0') throw ManifestError("dataset: bad label on row " + std::to_string(row));
      d.y.push_back(v);
    }
    d.x.push_back(std::move(x));
  }
  return d;
}

}  // namespace ecomp
