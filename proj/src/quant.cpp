#include "grace/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace grace {

namespace {

constexpr double kScaleFloor = 1e-8;
constexpr char kMagic[4] = {'G', 'R', 'Q', '1'};

Index padded_count(Index n, Index g) { return (n + g - 1) / g * g; }

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) {
    throw std::runtime_error("packed blob: truncated header");
  }
  std::uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  }
  pos += sizeof(T);
  return static_cast<T>(v);
}

int quantize_code(double w, double s, const QuantConfig& cfg) {
  const double c = round_half_even(w / s);
  return static_cast<int>(std::clamp(c, -cfg.q_n(), cfg.q_p()));
}

}  // namespace

void QuantConfig::validate() const {
  if (bits != 4 && bits != 8) {
    throw std::invalid_argument("QuantConfig: bits must be 4 or 8");
  }
  if (group_size <= 0) {
    throw std::invalid_argument("QuantConfig: group_size must be positive");
  }
}

double round_half_even(double x) {
  const double fl = std::floor(x);
  const double diff = x - fl;
  if (diff > 0.5) return fl + 1.0;
  if (diff < 0.5) return fl;
  return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

double percentile_abs(const Vector& group, double pct) {
  if (group.size() == 0) throw std::invalid_argument("percentile_abs: empty group");
  std::vector<double> v(group.size());
  for (Index i = 0; i < group.size(); ++i) v[static_cast<size_t>(i)] = std::abs(group[i]);
  std::sort(v.begin(), v.end());
  const double rank = pct * static_cast<double>(v.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(rank));
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

Vector init_scales(const Vector& flat_padded, const QuantConfig& cfg) {
  cfg.validate();
  if (flat_padded.size() == 0 || flat_padded.size() % cfg.group_size != 0) {
    throw std::invalid_argument("init_scales: length must be a positive multiple of group_size");
  }
  const Index groups = flat_padded.size() / cfg.group_size;
  Vector thetas(groups);
  for (Index g = 0; g < groups; ++g) {
    const double p99 = percentile_abs(flat_padded.segment(g * cfg.group_size, cfg.group_size), 0.99);
    thetas[g] = std::log(std::max(kScaleFloor, p99) / cfg.q_p());
  }
  return thetas;
}

Vector fake_quantize(const Vector& group, double theta, const QuantConfig& cfg) {
  const double s = std::exp(theta);
  Vector out(group.size());
  for (Index i = 0; i < group.size(); ++i) {
    out[i] = s * quantize_code(group[i], s, cfg);
  }
  return out;
}

SteGrads ste_backward(const Vector& upstream, const Vector& w, double theta,
                      const QuantConfig& cfg) {
  if (upstream.size() != w.size()) {
    throw std::invalid_argument("ste_backward: upstream/weight size mismatch");
  }
  const double s = std::exp(theta);
  SteGrads g;
  g.grad_w = Vector::Zero(w.size());
  double grad_s = 0.0;
  for (Index i = 0; i < w.size(); ++i) {
    const double u = w[i] / s;
    const double c = round_half_even(u);
    if (c < -cfg.q_n()) {
      grad_s += upstream[i] * -cfg.q_n();
    } else if (c > cfg.q_p()) {
      grad_s += upstream[i] * cfg.q_p();
    } else {
      g.grad_w[i] = upstream[i];
      grad_s += upstream[i] * (c - u);
    }
  }
  if (cfg.lsq_grad_scale) {
    grad_s /= std::sqrt(static_cast<double>(w.size()) * cfg.q_p());
  }
  g.grad_theta = grad_s * s;  // chain through s = exp(theta)
  return g;
}

QuantizedTensor QuantizedTensor::from_matrix(const Matrix& w, const QuantConfig& cfg) {
  cfg.validate();
  QuantizedTensor q;
  q.d_out = w.rows();
  q.d_in = w.cols();
  q.true_count = w.size();
  q.group_size = cfg.group_size;
  const Index padded = padded_count(q.true_count, cfg.group_size);
  q.weights = Vector::Zero(padded);
  Index k = 0;
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) q.weights[k++] = w(r, c);
  }
  q.thetas = init_scales(q.weights, cfg);
  return q;
}

Matrix QuantizedTensor::dequantized(const QuantConfig& cfg) const {
  Matrix out(d_out, d_in);
  for (Index g = 0; g < group_count(); ++g) {
    const Vector fq = fake_quantize(weights.segment(g * group_size, group_size), thetas[g], cfg);
    for (Index i = 0; i < group_size; ++i) {
      const Index flat = g * group_size + i;
      if (flat >= true_count) break;
      out(flat / d_in, flat % d_in) = fq[i];
    }
  }
  return out;
}

Matrix quantized_linear(const Matrix& x, const QuantizedTensor& qw, const QuantConfig& cfg) {
  if (x.cols() != qw.d_in) {
    throw std::invalid_argument("quantized_linear: x columns must equal d_in");
  }
  return x * qw.dequantized(cfg).transpose();
}

Var quantized_linear_node(Tape& t, Var x, Var w_flat, Var thetas,
                          Index d_out, Index d_in, const QuantConfig& cfg) {
  cfg.validate();
  const Matrix& wv = t.value(w_flat);
  const Matrix& th = t.value(thetas);
  const Index padded = padded_count(d_out * d_in, cfg.group_size);
  if (wv.cols() != 1 || wv.rows() != padded) {
    throw std::invalid_argument("quantized_linear_node: flat weights must be padded column");
  }
  if (th.cols() != 1 || th.rows() != padded / cfg.group_size) {
    throw std::invalid_argument("quantized_linear_node: one theta per group required");
  }
  if (t.value(x).cols() != d_in) {
    throw std::invalid_argument("quantized_linear_node: x columns must equal d_in");
  }

  QuantizedTensor q;
  q.d_out = d_out;
  q.d_in = d_in;
  q.true_count = d_out * d_in;
  q.group_size = cfg.group_size;
  q.weights = wv.col(0);
  q.thetas = th.col(0);
  const Matrix wq = q.dequantized(cfg);

  return t.emit(t.value(x) * wq.transpose(), {x, w_flat, thetas},
                [x, w_flat, thetas, wq, q, cfg](Tape& t, Var, const Matrix& g) {
                  t.add_grad(x, g * wq);
                  const Matrix gw_mat = g.transpose() * t.value(x);  // d_out x d_in
                  // flatten upstream row-major to line up with the groups
                  Vector up = Vector::Zero(q.weights.size());
                  Index k = 0;
                  for (Index r = 0; r < q.d_out; ++r) {
                    for (Index c = 0; c < q.d_in; ++c) up[k++] = gw_mat(r, c);
                  }
                  Vector grad_w(q.weights.size());
                  Vector grad_th(q.group_count());
                  for (Index grp = 0; grp < q.group_count(); ++grp) {
                    const SteGrads sg = ste_backward(
                        up.segment(grp * q.group_size, q.group_size),
                        q.weights.segment(grp * q.group_size, q.group_size),
                        q.thetas[grp], cfg);
                    grad_w.segment(grp * q.group_size, q.group_size) = sg.grad_w;
                    grad_th[grp] = sg.grad_theta;
                  }
                  t.add_grad(w_flat, grad_w);
                  t.add_grad(thetas, grad_th);
                });
}

PackedBlob pack(const QuantizedTensor& qw, const QuantConfig& cfg) {
  cfg.validate();
  if (qw.group_size != cfg.group_size) {
    throw std::invalid_argument("pack: tensor/config group size mismatch");
  }
  PackedBlob b;
  b.bits = static_cast<std::uint8_t>(cfg.bits);
  b.group_size = static_cast<std::uint32_t>(cfg.group_size);
  b.d_out = static_cast<std::uint32_t>(qw.d_out);
  b.d_in = static_cast<std::uint32_t>(qw.d_in);
  b.true_count = static_cast<std::uint64_t>(qw.true_count);
  b.scales.resize(static_cast<size_t>(qw.group_count()));

  const Index n = qw.weights.size();
  std::vector<int> codes(static_cast<size_t>(n));
  for (Index g = 0; g < qw.group_count(); ++g) {
    const double s = std::exp(qw.thetas[g]);
    b.scales[static_cast<size_t>(g)] = static_cast<float>(s);
    for (Index i = 0; i < cfg.group_size; ++i) {
      const Index flat = g * cfg.group_size + i;
      codes[static_cast<size_t>(flat)] = quantize_code(qw.weights[flat], s, cfg);
    }
  }

  if (cfg.bits == 4) {
    b.payload.resize(static_cast<size_t>((n + 1) / 2), 0);
    for (Index i = 0; i < n; ++i) {
      const std::uint8_t nibble = static_cast<std::uint8_t>(codes[static_cast<size_t>(i)] & 0x0F);
      if (i % 2 == 0) {
        b.payload[static_cast<size_t>(i / 2)] |= nibble;
      } else {
        b.payload[static_cast<size_t>(i / 2)] |= static_cast<std::uint8_t>(nibble << 4);
      }
    }
  } else {
    b.payload.resize(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
      b.payload[static_cast<size_t>(i)] =
          static_cast<std::uint8_t>(static_cast<std::int8_t>(codes[static_cast<size_t>(i)]));
    }
  }
  return b;
}

std::vector<std::uint8_t> PackedBlob::to_bytes() const {
  std::vector<std::uint8_t> out;
  out.reserve(byte_size());
  for (char c : kMagic) out.push_back(static_cast<std::uint8_t>(c));
  put_le(out, version);
  out.push_back(bits);
  out.push_back(std::uint8_t{0});  // pad
  put_le(out, group_size);
  put_le(out, d_out);
  put_le(out, d_in);
  put_le(out, true_count);
  put_le(out, static_cast<std::uint32_t>(scales.size()));
  for (float s : scales) {
    std::uint32_t u;
    std::memcpy(&u, &s, 4);
    put_le(out, u);
  }
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

PackedBlob PackedBlob::from_bytes(const std::vector<std::uint8_t>& bytes) {
  size_t pos = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("packed blob: bad magic");
  }
  pos = 4;
  PackedBlob b;
  b.version = get_le<std::uint16_t>(bytes, pos);
  if (b.version != 1) throw std::runtime_error("packed blob: unsupported version");
  b.bits = get_le<std::uint8_t>(bytes, pos);
  if (b.bits != 4 && b.bits != 8) throw std::runtime_error("packed blob: unsupported bit width");
  (void)get_le<std::uint8_t>(bytes, pos);  // pad
  b.group_size = get_le<std::uint32_t>(bytes, pos);
  b.d_out = get_le<std::uint32_t>(bytes, pos);
  b.d_in = get_le<std::uint32_t>(bytes, pos);
  b.true_count = get_le<std::uint64_t>(bytes, pos);
  const std::uint32_t groups = get_le<std::uint32_t>(bytes, pos);
  b.scales.resize(groups);
  for (std::uint32_t g = 0; g < groups; ++g) {
    const std::uint32_t u = get_le<std::uint32_t>(bytes, pos);
    std::memcpy(&b.scales[g], &u, 4);
  }
  const std::uint64_t n = static_cast<std::uint64_t>(groups) * b.group_size;
  const std::uint64_t expected = b.bits == 4 ? (n + 1) / 2 : n;
  if (bytes.size() - pos != expected) {
    throw std::runtime_error("packed blob: payload size mismatch");
  }
  b.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return b;
}

void PackedBlob::write_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("packed blob: cannot open " + path);
  const auto bytes = to_bytes();
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("packed blob: write failed for " + path);
}

PackedBlob PackedBlob::read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("packed blob: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

namespace {

int decode_code(const PackedBlob& b, Index flat) {
  if (b.bits == 4) {
    const std::uint8_t byte = b.payload[static_cast<size_t>(flat / 2)];
    const int nibble = flat % 2 == 0 ? (byte & 0x0F) : (byte >> 4);
    return nibble >= 8 ? nibble - 16 : nibble;
  }
  return static_cast<int>(static_cast<std::int8_t>(b.payload[static_cast<size_t>(flat)]));
}

}  // namespace

QuantizedTensor unpack(const PackedBlob& blob) {
  QuantizedTensor q;
  q.d_out = static_cast<Index>(blob.d_out);
  q.d_in = static_cast<Index>(blob.d_in);
  q.true_count = static_cast<Index>(blob.true_count);
  q.group_size = static_cast<Index>(blob.group_size);
  const Index n = static_cast<Index>(blob.scales.size()) * q.group_size;
  q.weights.resize(n);
  q.thetas.resize(static_cast<Index>(blob.scales.size()));
  for (Index g = 0; g < q.thetas.size(); ++g) {
    const double s = static_cast<double>(blob.scales[static_cast<size_t>(g)]);
    q.thetas[g] = std::log(s);
    for (Index i = 0; i < q.group_size; ++i) {
      const Index flat = g * q.group_size + i;
      q.weights[flat] = s * decode_code(blob, flat);
    }
  }
  return q;
}

Vector unpack_matvec(const PackedBlob& blob, const Vector& x) {
  const Index d_in = static_cast<Index>(blob.d_in);
  const Index d_out = static_cast<Index>(blob.d_out);
  if (x.size() != d_in) {
    throw std::invalid_argument("unpack_matvec: x length must equal d_in");
  }
  Vector y = Vector::Zero(d_out);
  const Index n = static_cast<Index>(blob.true_count);
  const Index g = static_cast<Index>(blob.group_size);
  for (Index flat = 0; flat < n; ++flat) {
    const double s = static_cast<double>(blob.scales[static_cast<size_t>(flat / g)]);
    y[flat / d_in] += s * decode_code(blob, flat) * x[flat % d_in];
  }
  return y;
}

}  // namespace grace
