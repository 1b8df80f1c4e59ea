#pragma once

#include "grace/numeric.hpp"
#include "grace/tape.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace grace {

/// Symmetric signed quantization range and grouping. INT4 maps to [-8, 7],
/// INT8 to [-128, 127].
struct QuantConfig {
  int bits = 4;
  Index group_size = 128;
  // LSQ's optional 1/sqrt(g * q_p) scaling of the scale gradient; off unless
  // explicitly requested.
  bool lsq_grad_scale = false;

  double q_n() const { return bits == 4 ? 8.0 : 128.0; }
  double q_p() const { return bits == 4 ? 7.0 : 127.0; }
  void validate() const;
};

/// Round to nearest with ties to even, independent of the FP environment.
double round_half_even(double x);

/// Flattened weights (row-major over the original d_out x d_in matrix,
/// zero-padded to a whole number of groups) plus one log-scale per group.
struct QuantizedTensor {
  Index d_out = 0;
  Index d_in = 0;
  Index true_count = 0;   // d_out * d_in before padding
  Index group_size = 0;
  Vector weights;         // padded flat values
  Vector thetas;          // log-space scales, one per group

  Index group_count() const { return thetas.size(); }

  static QuantizedTensor from_matrix(const Matrix& w, const QuantConfig& cfg);
  /// Fake-quantized weights reshaped back to d_out x d_in.
  Matrix dequantized(const QuantConfig& cfg) const;
};

/// Percentile of |group| via linear interpolation on the sorted values at
/// rank pct * (len - 1).
double percentile_abs(const Vector& group, double pct);

/// theta_i = ln(max(1e-8, p99(|W_i|)) / q_p) for each group of the padded
/// flat vector.
Vector init_scales(const Vector& flat_padded, const QuantConfig& cfg);

/// s * clamp(round(w / s), -q_n, q_p) with s = exp(theta).
Vector fake_quantize(const Vector& group, double theta, const QuantConfig& cfg);

struct SteGrads {
  Vector grad_w;
  double grad_theta = 0.0;
};

/// Clipped straight-through backward for one group: grad_w passes the
/// upstream inside the clamp range and is zero outside; the scale gradient
/// follows LSQ (rounding residual inside the range, the clamped bound
/// outside), chained through s = exp(theta).
SteGrads ste_backward(const Vector& upstream, const Vector& w, double theta,
                      const QuantConfig& cfg);

/// x * dequantized(qw)^T computed through fake quantization.
Matrix quantized_linear(const Matrix& x, const QuantizedTensor& qw, const QuantConfig& cfg);

/// Differentiable quantized linear layer: routes gradients into the flat
/// weights (STE) and the per-group thetas (LSQ) as well as into x.
Var quantized_linear_node(Tape& t, Var x, Var w_flat, Var thetas,
                          Index d_out, Index d_in, const QuantConfig& cfg);

/// Serialized form: header, f32 scales, then two's-complement codes packed
/// two per byte for 4-bit (low nibble = even index) or one per byte for
/// 8-bit.
///
/// Byte layout (little-endian):
///   magic "GRQ1" | version u16 | bits u8 | pad u8 | group_size u32 |
///   d_out u32 | d_in u32 | true_element_count u64 | G u32 |
///   scales f32 x G | payload
struct PackedBlob {
  std::uint16_t version = 1;
  std::uint8_t bits = 4;
  std::uint32_t group_size = 128;
  std::uint32_t d_out = 0;
  std::uint32_t d_in = 0;
  std::uint64_t true_count = 0;
  std::vector<float> scales;
  std::vector<std::uint8_t> payload;

  std::size_t header_bytes() const { return 32; }
  std::size_t byte_size() const { return header_bytes() + 4 * scales.size() + payload.size(); }

  std::vector<std::uint8_t> to_bytes() const;
  static PackedBlob from_bytes(const std::vector<std::uint8_t>& bytes);
  void write_file(const std::string& path) const;
  static PackedBlob read_file(const std::string& path);
};

PackedBlob pack(const QuantizedTensor& qw, const QuantConfig& cfg);

/// Reconstructs a tensor whose codes and scales reproduce the blob exactly
/// (pack(unpack(b)) is byte-identical to b).
QuantizedTensor unpack(const PackedBlob& blob);

/// y = W_q x straight from the packed representation; x has length d_in and
/// the result has length d_out. Agrees with quantized_linear up to f32
/// scale rounding.
Vector unpack_matvec(const PackedBlob& blob, const Vector& x);

}  // namespace grace
