#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dgl/rng.hpp"
#include "dgl/tensor.hpp"

namespace dgl {

class CodecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct VqOptions {
  double decay = 0.99;        // EMA decay
  double epsilon = 1e-5;      // count smoothing in atom = sum / (count + epsilon)
  std::uint64_t dead_after = 1024;  // encoded vectors without a hit before an atom is reseeded
};

/// k channel groups, each with C atoms of its own dimension. Channels split as
/// floor(K/k) per group; the last group absorbs the remainder.
class Codebook {
 public:
  Codebook() = default;
  Codebook(std::size_t channels, std::size_t groups, std::size_t atoms);

  std::size_t channels() const { return channels_; }
  std::size_t groups() const { return dims_.size(); }
  std::size_t atoms() const { return atoms_; }
  std::size_t dim(std::size_t g) const { return dims_[g]; }
  std::size_t channel_offset(std::size_t g) const { return channel_offsets_[g]; }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::uint64_t version() const { return version_; }
  void set_version(std::uint64_t v) { version_ = v; }
  bool initialized() const { return initialized_; }
  void mark_initialized() { initialized_ = true; }

  std::span<float> atom(std::size_t g, std::size_t i) { return {values_.data() + value_offset(g, i), dims_[g]}; }
  std::span<const float> atom(std::size_t g, std::size_t i) const {
    return {values_.data() + value_offset(g, i), dims_[g]};
  }
  double& ema_count(std::size_t g, std::size_t i) { return counts_[g * atoms_ + i]; }
  double ema_count(std::size_t g, std::size_t i) const { return counts_[g * atoms_ + i]; }
  std::span<double> ema_sum(std::size_t g, std::size_t i) { return {sums_.data() + value_offset(g, i), dims_[g]}; }
  std::uint64_t& idle(std::size_t g, std::size_t i) { return idle_[g * atoms_ + i]; }

  /// All atom values, group-major then atom then dimension.
  const std::vector<float>& values() const { return values_; }
  std::vector<float>& values() { return values_; }

  bool same_geometry(const Codebook& other) const {
    return channels_ == other.channels_ && atoms_ == other.atoms_ && dims_ == other.dims_;
  }

  /// Replaces atoms and version with `other`'s (the decoder-side snapshot).
  void copy_atoms_from(const Codebook& other);

  /// Largest per-coordinate |difference| between the two codebooks' atoms.
  double max_atom_drift(const Codebook& other) const;

  /// k-means++-style seeding from the sub-vectors of x (no Lloyd iterations).
  /// At most 8192 sub-vectors per group are considered.
  template <typename T>
  void seed_from(const Tensor<T>& x, Rng& rng);

 private:
  std::size_t value_offset(std::size_t g, std::size_t i) const { return group_value_offsets_[g] + i * dims_[g]; }

  std::size_t channels_ = 0;
  std::size_t atoms_ = 0;
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> channel_offsets_;
  std::vector<std::size_t> group_value_offsets_;
  std::vector<float> values_;
  std::vector<double> counts_;
  std::vector<double> sums_;
  std::vector<std::uint64_t> idle_;
  std::uint64_t version_ = 0;
  bool initialized_ = false;
};

/// Indices laid out batch x group x row x column.
struct QuantizedBatch {
  std::size_t batch = 0;
  std::size_t extent = 0;  // N; activations are N x N
  std::size_t atoms = 0;   // C
  std::vector<std::size_t> dims;  // channels per group
  std::vector<std::uint32_t> indices;
  std::uint64_t codebook_version = 0;
  std::vector<int> labels;

  std::size_t groups() const { return dims.size(); }
  std::size_t channels() const;
  bool operator==(const QuantizedBatch&) const = default;
};

/// ceil(log2 C), and 0 for C = 1.
std::uint32_t bits_per_index(std::uint64_t atoms);

/// Nearest atom per (sample, group, site) by squared distance; ties go to the lowest index.
template <typename T>
QuantizedBatch encode(const Tensor<T>& x, const Codebook& cb);

template <typename T>
Tensor<T> decode(const QuantizedBatch& q, const Codebook& cb);

/// EMA refresh using the assignments in `q` (which must come from encoding x).
/// Untouched atoms keep their values; atoms idle for `dead_after` encoded
/// vectors are reseeded from a random sub-vector of x. Increments the version.
template <typename T>
void ema_update(Codebook& cb, const Tensor<T>& x, const QuantizedBatch& q, const VqOptions& opt, Rng& rng);

/// Encodes x with the current atoms, then applies ema_update.
template <typename T>
QuantizedBatch ema_update(Codebook& cb, const Tensor<T>& x, const VqOptions& opt, Rng& rng);

/// When the decoder copy is refreshed. Steps are counted from 1.
struct SyncPolicy {
  enum class Kind { Period, Rate };
  Kind kind = Kind::Period;
  std::uint64_t period = 1;  // fires when step % period == 0
  double rate = 1.0;         // fires when floor(step * rate) advances

  static SyncPolicy every(std::uint64_t period);
  static SyncPolicy fraction(double rate);

  bool fires(std::uint64_t step) const;
  /// Fraction of steps that sync, the alpha of the bit accounting.
  double alpha() const;
};

/// Copies encoder atoms into the decoder when the policy fires at `step`.
/// Returns whether a sync happened.
bool sync_codebooks(const Codebook& encoder, Codebook& decoder, const SyncPolicy& policy, std::uint64_t step);

/// Bits to send one quantized batch: B*k*N^2*ceil(log2 C) + alpha*32*(K + K_prev)*C.
double batch_bits(std::uint64_t B, std::uint64_t N, std::uint64_t K_prev, std::uint64_t K, std::uint64_t C,
                  std::uint64_t k, double alpha);
/// 32*B*N^2*K / batch_bits.
double bandwidth_compression(std::uint64_t B, std::uint64_t N, std::uint64_t K_prev, std::uint64_t K,
                             std::uint64_t C, std::uint64_t k, double alpha);
/// Bits of a quantized buffer of M samples: M*k*N^2*ceil(log2 C) + 32*K*C.
std::uint64_t buffer_bits(std::uint64_t M, std::uint64_t N, std::uint64_t K, std::uint64_t C, std::uint64_t k);
/// 32*M*N^2*K / buffer_bits.
double buffer_compression(std::uint64_t M, std::uint64_t N, std::uint64_t K, std::uint64_t C, std::uint64_t k);

/// Index bits of one quantized batch as stored: B*k*N^2*ceil(log2 C).
std::uint64_t index_bits(const QuantizedBatch& q);

/// Little-endian wire formats.
///   DGLQ: "DGLQ", u16 format=1, u32 B, k, N, C, u32 d[k], indices packed LSB-first
///         at ceil(log2 C) bits and byte-aligned per spatial row (order b, g, row),
///         then B labels as i32.
///   DGLC: "DGLC", u64 version, u32 k, C, u32 d[k], then f32 atoms (group, atom, dim).
std::vector<std::uint8_t> serialize(const QuantizedBatch& q);
QuantizedBatch deserialize_quantized(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize(const Codebook& cb);
Codebook deserialize_codebook(std::span<const std::uint8_t> bytes);

/// Mean squared difference between two same-shaped tensors.
template <typename T>
double mean_squared_error(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace dgl
