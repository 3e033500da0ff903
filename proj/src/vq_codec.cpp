#include "dgl/vq_codec.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace dgl {

Codebook::Codebook(std::size_t channels, std::size_t groups, std::size_t atoms)
    : channels_(channels), atoms_(atoms) {
  if (groups == 0 || atoms == 0) throw CodecError("codebook needs at least one group and one atom");
  if (groups > channels)
    throw CodecError("cannot split " + std::to_string(channels) + " channels into " + std::to_string(groups) +
                     " groups");
  const std::size_t d = channels / groups;
  std::size_t value_off = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    dims_.push_back(g + 1 == groups ? channels - d * (groups - 1) : d);
    channel_offsets_.push_back(g * d);
    group_value_offsets_.push_back(value_off);
    value_off += atoms * dims_.back();
  }
  values_.assign(value_off, 0.0f);
  sums_.assign(value_off, 0.0);
  counts_.assign(groups * atoms, 0.0);
  idle_.assign(groups * atoms, 0);
}

void Codebook::copy_atoms_from(const Codebook& other) {
  if (!same_geometry(other)) throw CodecError("codebook geometry mismatch on sync");
  values_ = other.values_;
  version_ = other.version_;
  initialized_ = other.initialized_;
}

double Codebook::max_atom_drift(const Codebook& other) const {
  if (!same_geometry(other)) throw CodecError("codebook geometry mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(values_[i]) - static_cast<double>(other.values_[i])));
  return m;
}

namespace {

template <typename T>
void check_input(const Tensor<T>& x, const Codebook& cb) {
  const Shape& s = x.shape();
  if (s.channels != cb.channels())
    throw CodecError("activation has " + std::to_string(s.channels) + " channels but codebook expects " +
                     std::to_string(cb.channels()));
  if (s.height != s.width) throw CodecError("activation " + s.str() + " is not spatially square");
}

template <typename T>
void load_subvector(const Tensor<T>& x, const Codebook& cb, std::size_t b, std::size_t g, std::size_t site,
                    double* out) {
  const std::size_t hw = x.shape().height * x.shape().width;
  const T* base = x.data() + (b * x.shape().channels + cb.channel_offset(g)) * hw + site;
  for (std::size_t c = 0; c < cb.dim(g); ++c) out[c] = static_cast<double>(base[c * hw]);
}

std::uint32_t nearest(const Codebook& cb, std::size_t g, const double* v) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const std::size_t d = cb.dim(g);
  for (std::size_t i = 0; i < cb.atoms(); ++i) {
    const auto a = cb.atom(g, i);
    double dist = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = v[c] - static_cast<double>(a[c]);
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::uint32_t>(i);
    }
  }
  return best;
}

}  // namespace

template <typename T>
void Codebook::seed_from(const Tensor<T>& x, Rng& rng) {
  check_input(x, *this);
  const std::size_t hw = x.shape().height * x.shape().width;
  const std::size_t total = x.shape().batch * hw;
  if (total == 0) throw CodecError("cannot seed a codebook from an empty batch");
  std::vector<std::size_t> pool(total);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  const std::size_t take = std::min<std::size_t>(total, 8192);
  for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + uniform_index(rng, total - i)]);
  pool.resize(take);

  for (std::size_t g = 0; g < groups(); ++g) {
    const std::size_t d = dims_[g];
    std::vector<double> cand(take * d);
    for (std::size_t i = 0; i < take; ++i) load_subvector(x, *this, pool[i] / hw, g, pool[i] % hw, &cand[i * d]);
    std::vector<double> dist(take, std::numeric_limits<double>::infinity());
    std::size_t pick = uniform_index(rng, take);
    for (std::size_t a = 0; a < atoms_; ++a) {
      if (a > 0) {
        const double total_d = std::accumulate(dist.begin(), dist.end(), 0.0);
        if (total_d > 0.0) {
          double r = uniform01(rng) * total_d;
          pick = take - 1;
          for (std::size_t i = 0; i < take; ++i) {
            r -= dist[i];
            if (r < 0.0) {
              pick = i;
              break;
            }
          }
        } else {
          pick = uniform_index(rng, take);
        }
      }
      auto atom_v = atom(g, a);
      for (std::size_t c = 0; c < d; ++c) atom_v[c] = static_cast<float>(cand[pick * d + c]);
      for (std::size_t i = 0; i < take; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = cand[i * d + c] - static_cast<double>(atom_v[c]);
          s += diff * diff;
        }
        dist[i] = std::min(dist[i], s);
      }
    }
  }
  std::fill(counts_.begin(), counts_.end(), 0.0);
  std::fill(sums_.begin(), sums_.end(), 0.0);
  std::fill(idle_.begin(), idle_.end(), 0);
  initialized_ = true;
  ++version_;
}

std::size_t QuantizedBatch::channels() const { return std::accumulate(dims.begin(), dims.end(), std::size_t{0}); }

std::uint32_t bits_per_index(std::uint64_t atoms) {
  if (atoms == 0) throw CodecError("codebook must have at least one atom");
  return static_cast<std::uint32_t>(std::bit_width(atoms - 1));
}

template <typename T>
QuantizedBatch encode(const Tensor<T>& x, const Codebook& cb) {
  check_input(x, cb);
  const Shape& s = x.shape();
  const std::size_t hw = s.height * s.width;
  QuantizedBatch q;
  q.batch = s.batch;
  q.extent = s.height;
  q.atoms = cb.atoms();
  q.dims = cb.dims();
  q.codebook_version = cb.version();
  q.indices.resize(s.batch * cb.groups() * hw);
  std::vector<double> v(s.channels);
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t g = 0; g < cb.groups(); ++g)
      for (std::size_t site = 0; site < hw; ++site) {
        load_subvector(x, cb, b, g, site, v.data());
        q.indices[(b * cb.groups() + g) * hw + site] = nearest(cb, g, v.data());
      }
  return q;
}

template <typename T>
Tensor<T> decode(const QuantizedBatch& q, const Codebook& cb) {
  if (q.dims != cb.dims() || q.atoms != cb.atoms())
    throw CodecError("quantized batch (C=" + std::to_string(q.atoms) + ", k=" + std::to_string(q.groups()) +
                     ") does not match decoder codebook (C=" + std::to_string(cb.atoms()) +
                     ", k=" + std::to_string(cb.groups()) + ")");
  const std::size_t hw = q.extent * q.extent;
  if (q.indices.size() != q.batch * q.groups() * hw) throw CodecError("quantized batch index count is inconsistent");
  Tensor<T> out(Shape{q.batch, cb.channels(), q.extent, q.extent});
  for (std::size_t b = 0; b < q.batch; ++b)
    for (std::size_t g = 0; g < q.groups(); ++g)
      for (std::size_t site = 0; site < hw; ++site) {
        const std::uint32_t idx = q.indices[(b * q.groups() + g) * hw + site];
        if (idx >= cb.atoms())
          throw CodecError("index " + std::to_string(idx) + " out of range for " + std::to_string(cb.atoms()) +
                           " atoms");
        const auto a = cb.atom(g, idx);
        T* base = out.data() + (b * cb.channels() + cb.channel_offset(g)) * hw + site;
        for (std::size_t c = 0; c < a.size(); ++c) base[c * hw] = static_cast<T>(a[c]);
      }
  return out;
}

template <typename T>
void ema_update(Codebook& cb, const Tensor<T>& x, const QuantizedBatch& q, const VqOptions& opt, Rng& rng) {
  if (!(opt.decay >= 0.0 && opt.decay < 1.0)) throw CodecError("EMA decay must lie in [0, 1)");
  check_input(x, cb);
  const Shape& s = x.shape();
  const std::size_t hw = s.height * s.width;
  if (q.indices.size() != s.batch * cb.groups() * hw) throw CodecError("assignments do not match activation shape");
  const double gamma = opt.decay;
  const std::size_t vectors = s.batch * hw;
  std::vector<double> v(s.channels);

  for (std::size_t g = 0; g < cb.groups(); ++g) {
    const std::size_t d = cb.dim(g);
    std::vector<double> n(cb.atoms(), 0.0);
    std::vector<double> sum(cb.atoms() * d, 0.0);
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t site = 0; site < hw; ++site) {
        const std::uint32_t i = q.indices[(b * cb.groups() + g) * hw + site];
        load_subvector(x, cb, b, g, site, v.data());
        n[i] += 1.0;
        for (std::size_t c = 0; c < d; ++c) sum[i * d + c] += v[c];
      }
    for (std::size_t i = 0; i < cb.atoms(); ++i) {
      double& count = cb.ema_count(g, i);
      auto esum = cb.ema_sum(g, i);
      count = gamma * count + (1.0 - gamma) * n[i];
      for (std::size_t c = 0; c < d; ++c) esum[c] = gamma * esum[c] + (1.0 - gamma) * sum[i * d + c];
      if (n[i] > 0.0) {
        cb.idle(g, i) = 0;
        auto a = cb.atom(g, i);
        for (std::size_t c = 0; c < d; ++c) a[c] = static_cast<float>(esum[c] / (count + opt.epsilon));
        continue;
      }
      cb.idle(g, i) += vectors;
      if (opt.dead_after > 0 && cb.idle(g, i) >= opt.dead_after) {
        const std::size_t pick = uniform_index(rng, vectors);
        load_subvector(x, cb, pick / hw, g, pick % hw, v.data());
        auto a = cb.atom(g, i);
        for (std::size_t c = 0; c < d; ++c) {
          a[c] = static_cast<float>(v[c]);
          esum[c] = 0.0;
        }
        count = 0.0;
        cb.idle(g, i) = 0;
      }
    }
  }
  cb.mark_initialized();
  cb.set_version(cb.version() + 1);
}

template <typename T>
QuantizedBatch ema_update(Codebook& cb, const Tensor<T>& x, const VqOptions& opt, Rng& rng) {
  auto q = encode(x, cb);
  ema_update(cb, x, q, opt, rng);
  return q;
}

SyncPolicy SyncPolicy::every(std::uint64_t period) {
  if (period == 0) throw std::invalid_argument("codebook sync period must be at least 1");
  SyncPolicy p;
  p.kind = Kind::Period;
  p.period = period;
  return p;
}

SyncPolicy SyncPolicy::fraction(double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("codebook sync rate must lie in [0, 1]");
  SyncPolicy p;
  p.kind = Kind::Rate;
  p.rate = rate;
  return p;
}

bool SyncPolicy::fires(std::uint64_t step) const {
  if (step == 0) return false;
  if (kind == Kind::Period) return step % period == 0;
  return std::floor(static_cast<double>(step) * rate) > std::floor(static_cast<double>(step - 1) * rate);
}

double SyncPolicy::alpha() const { return kind == Kind::Period ? 1.0 / static_cast<double>(period) : rate; }

bool sync_codebooks(const Codebook& encoder, Codebook& decoder, const SyncPolicy& policy, std::uint64_t step) {
  if (!encoder.same_geometry(decoder)) throw CodecError("encoder and decoder codebooks differ in shape");
  if (!policy.fires(step)) return false;
  decoder.copy_atoms_from(encoder);
  return true;
}

double batch_bits(std::uint64_t B, std::uint64_t N, std::uint64_t K_prev, std::uint64_t K, std::uint64_t C,
                  std::uint64_t k, double alpha) {
  const auto index = static_cast<double>(B * k * N * N * bits_per_index(C));
  return index + alpha * 32.0 * static_cast<double>((K + K_prev) * C);
}

double bandwidth_compression(std::uint64_t B, std::uint64_t N, std::uint64_t K_prev, std::uint64_t K,
                             std::uint64_t C, std::uint64_t k, double alpha) {
  return static_cast<double>(32 * B * N * N * K) / batch_bits(B, N, K_prev, K, C, k, alpha);
}

std::uint64_t buffer_bits(std::uint64_t M, std::uint64_t N, std::uint64_t K, std::uint64_t C, std::uint64_t k) {
  return M * k * N * N * bits_per_index(C) + 32 * K * C;
}

double buffer_compression(std::uint64_t M, std::uint64_t N, std::uint64_t K, std::uint64_t C, std::uint64_t k) {
  return static_cast<double>(32 * M * N * N * K) / static_cast<double>(buffer_bits(M, N, K, C, k));
}

std::uint64_t index_bits(const QuantizedBatch& q) {
  return static_cast<std::uint64_t>(q.indices.size()) * bits_per_index(q.atoms);
}

namespace {

class Writer {
 public:
  void bytes(const char* s, std::size_t n) { out.insert(out.end(), s, s + n); }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}
  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw CodecError(std::string("truncated ") + what + " at byte offset " + std::to_string(pos));
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
  }
  void magic(const char* m) {
    need(4, "magic");
    if (std::memcmp(buf.data() + pos, m, 4) != 0)
      throw CodecError(std::string("bad magic at byte offset 0, expected ") + m);
    pos += 4;
  }
  std::span<const std::uint8_t> buf;
  std::size_t pos = 0;
};

constexpr std::uint16_t kQuantFormat = 1;

std::size_t row_bytes(std::size_t extent, std::uint32_t bits) { return (extent * bits + 7) / 8; }

}  // namespace

std::vector<std::uint8_t> serialize(const QuantizedBatch& q) {
  if (q.labels.size() != q.batch)
    throw CodecError("serialize: " + std::to_string(q.labels.size()) + " labels for a batch of " +
                     std::to_string(q.batch));
  if (q.indices.size() != q.batch * q.groups() * q.extent * q.extent)
    throw CodecError("serialize: index count does not match the batch geometry");
  Writer w;
  w.bytes("DGLQ", 4);
  w.le<std::uint16_t>(kQuantFormat);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(q.batch));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(q.groups()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(q.extent));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(q.atoms));
  for (auto d : q.dims) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
  const std::uint32_t bits = bits_per_index(q.atoms);
  const std::size_t rows = q.batch * q.groups() * q.extent;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<std::uint8_t> row(row_bytes(q.extent, bits), 0);
    for (std::size_t x = 0; x < q.extent; ++x) {
      const std::uint32_t idx = q.indices[r * q.extent + x];
      for (std::uint32_t bit = 0; bit < bits; ++bit)
        if ((idx >> bit) & 1U) {
          const std::size_t p = x * bits + bit;
          row[p / 8] |= static_cast<std::uint8_t>(1U << (p % 8));
        }
    }
    w.out.insert(w.out.end(), row.begin(), row.end());
  }
  for (int label : q.labels) w.le<std::uint32_t>(static_cast<std::uint32_t>(label));
  return std::move(w.out);
}

QuantizedBatch deserialize_quantized(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic("DGLQ");
  const auto format = r.le<std::uint16_t>("format version");
  if (format != kQuantFormat) throw CodecError("unsupported DGLQ format version " + std::to_string(format));
  QuantizedBatch q;
  q.batch = r.le<std::uint32_t>("batch size");
  const std::size_t k = r.le<std::uint32_t>("group count");
  q.extent = r.le<std::uint32_t>("extent");
  q.atoms = r.le<std::uint32_t>("atom count");
  if (q.atoms == 0) throw CodecError("DGLQ header declares zero atoms");
  for (std::size_t g = 0; g < k; ++g) q.dims.push_back(r.le<std::uint32_t>("group dims"));
  const std::uint32_t bits = bits_per_index(q.atoms);
  const std::size_t rows = q.batch * k * q.extent;
  const std::size_t rb = row_bytes(q.extent, bits);
  r.need(rows * rb, "index payload");
  q.indices.resize(rows * q.extent);
  for (std::size_t row = 0; row < rows; ++row) {
    const std::uint8_t* p = r.buf.data() + r.pos + row * rb;
    for (std::size_t x = 0; x < q.extent; ++x) {
      std::uint32_t idx = 0;
      for (std::uint32_t bit = 0; bit < bits; ++bit) {
        const std::size_t b = x * bits + bit;
        if ((p[b / 8] >> (b % 8)) & 1U) idx |= 1U << bit;
      }
      if (idx >= q.atoms)
        throw CodecError("index " + std::to_string(idx) + " out of range at byte offset " +
                         std::to_string(r.pos + row * rb));
      q.indices[row * q.extent + x] = idx;
    }
  }
  r.pos += rows * rb;
  for (std::size_t b = 0; b < q.batch; ++b) q.labels.push_back(static_cast<int>(r.le<std::uint32_t>("labels")));
  if (r.pos != bytes.size()) throw CodecError("trailing bytes after DGLQ payload at byte offset " + std::to_string(r.pos));
  return q;
}

std::vector<std::uint8_t> serialize(const Codebook& cb) {
  Writer w;
  w.bytes("DGLC", 4);
  w.le<std::uint64_t>(cb.version());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(cb.groups()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(cb.atoms()));
  for (auto d : cb.dims()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (float v : cb.values()) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  return std::move(w.out);
}

Codebook deserialize_codebook(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic("DGLC");
  const auto version = r.le<std::uint64_t>("version");
  const std::size_t k = r.le<std::uint32_t>("group count");
  const std::size_t C = r.le<std::uint32_t>("atom count");
  std::vector<std::size_t> dims;
  for (std::size_t g = 0; g < k; ++g) dims.push_back(r.le<std::uint32_t>("group dims"));
  const std::size_t K = std::accumulate(dims.begin(), dims.end(), std::size_t{0});
  Codebook cb(K, k, C);
  if (cb.dims() != dims) throw CodecError("DGLC group dims are not a floor split of " + std::to_string(K) + " channels");
  for (auto& v : cb.values()) v = std::bit_cast<float>(r.le<std::uint32_t>("atoms"));
  if (r.pos != bytes.size()) throw CodecError("trailing bytes after DGLC payload at byte offset " + std::to_string(r.pos));
  cb.set_version(version);
  cb.mark_initialized();
  return cb;
}

template <typename T>
double mean_squared_error(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("mean_squared_error: " + a.shape().str() + " vs " + b.shape().str());
  if (a.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

#define DGL_INSTANTIATE(T)                                                                            \
  template void Codebook::seed_from<T>(const Tensor<T>&, Rng&);                                       \
  template QuantizedBatch encode<T>(const Tensor<T>&, const Codebook&);                               \
  template Tensor<T> decode<T>(const QuantizedBatch&, const Codebook&);                               \
  template void ema_update<T>(Codebook&, const Tensor<T>&, const QuantizedBatch&, const VqOptions&, Rng&); \
  template QuantizedBatch ema_update<T>(Codebook&, const Tensor<T>&, const VqOptions&, Rng&);         \
  template double mean_squared_error<T>(const Tensor<T>&, const Tensor<T>&);

DGL_INSTANTIATE(float)
DGL_INSTANTIATE(double)
#undef DGL_INSTANTIATE

}  // namespace dgl
