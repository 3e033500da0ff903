#include "dgl/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace dgl {

template <typename T>
Batch<T> gather(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t per = data.sample.per_sample();
  Shape s = data.sample;
  s.batch = indices.size();
  std::vector<T> x(s.numel());
  Batch<T> b;
  b.y.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t k = indices[i];
    std::copy(data.images.begin() + static_cast<std::ptrdiff_t>(k * per),
              data.images.begin() + static_cast<std::ptrdiff_t>((k + 1) * per), x.begin() + static_cast<std::ptrdiff_t>(i * per));
    b.y.push_back(data.labels[k]);
  }
  b.x = Tensor<T>(s, std::move(x));
  return b;
}

template <typename T>
Batch<T> slice(const Dataset& data, std::size_t first, std::size_t count) {
  count = std::min(count, data.size() - std::min(first, data.size()));
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  return gather<T>(data, idx);
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::Gaussians:
      return "synthetic-gaussians";
    case DatasetKind::Spirals:
      return "synthetic-spirals";
    case DatasetKind::Cifar10:
      return "cifar10-binary";
    case DatasetKind::Idx:
      return "idx-images";
  }
  return "synthetic-gaussians";
}

DatasetKind parse_dataset_kind(const std::string& text) {
  if (text == "synthetic-gaussians") return DatasetKind::Gaussians;
  if (text == "synthetic-spirals") return DatasetKind::Spirals;
  if (text == "cifar10-binary") return DatasetKind::Cifar10;
  if (text == "idx-images") return DatasetKind::Idx;
  throw std::invalid_argument("unknown dataset kind '" + text + "'");
}

Dataset make_gaussians(std::size_t classes, std::size_t channels, std::size_t side, std::size_t n, double noise,
                       double separation, std::uint64_t seed, std::uint64_t stream) {
  if (classes < 2 || channels == 0 || side == 0) throw std::invalid_argument("make_gaussians: degenerate geometry");
  Dataset d;
  d.sample = {1, channels, side, side};
  d.classes = classes;
  const std::size_t per = d.sample.per_sample();
  // Class means are piecewise constant on a coarse grid so the signal is spatially coherent.
  const std::size_t cell = side >= 4 ? side / 2 : 1;
  Rng mean_rng(derive_seed(seed, "gaussian-means"));
  std::vector<float> means(classes * per);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t cells = (side + cell - 1) / cell;
    std::vector<double> coarse(channels * cells * cells);
    for (auto& v : coarse) v = separation * normal(mean_rng);
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          means[c * per + (ch * side + y) * side + x] =
              static_cast<float>(coarse[(ch * cells + y / cell) * cells + x / cell]);
  }
  Rng rng(derive_seed(seed, "gaussian-samples", stream));
  d.images.resize(n * per);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(i % classes);
    d.labels[i] = static_cast<int>(c);
    for (std::size_t k = 0; k < per; ++k)
      d.images[i * per + k] = means[c * per + k] + static_cast<float>(noise * normal(rng));
  }
  return d;
}

Dataset make_spirals(std::size_t classes, std::size_t side, std::size_t n, double noise, std::uint64_t seed,
                     std::uint64_t stream) {
  if (classes < 2 || side < 2) throw std::invalid_argument("make_spirals: degenerate geometry");
  Dataset d;
  d.sample = {1, 1, side, side};
  d.classes = classes;
  const std::size_t per = side * side;
  Rng rng(derive_seed(seed, "spirals", stream));
  d.images.assign(n * per, 0.0f);
  d.labels.resize(n);
  const double half = static_cast<double>(side - 1) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = i % classes;
    d.labels[i] = static_cast<int>(c);
    const double t = uniform(rng, 0.1, 1.0);
    const double angle = 3.0 * std::numbers::pi * t + 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes) +
                         0.15 * noise * normal(rng);
    const double px = half + half * t * std::cos(angle);
    const double py = half + half * t * std::sin(angle);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double dx = static_cast<double>(x) - px, dy = static_cast<double>(y) - py;
        d.images[i * per + y * side + x] =
            static_cast<float>(std::exp(-(dx * dx + dy * dy) / 2.0) + 0.05 * noise * normal(rng));
      }
  }
  return d;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw DataError("missing data file: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open data file: " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off, const std::string& path) {
  if (off + 4 > buf.size())
    throw DataError(path + ": header truncated at byte offset " + std::to_string(buf.size()));
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) | (std::uint32_t{buf[off + 2]} << 8) |
         std::uint32_t{buf[off + 3]};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void append(Dataset& dst, const Dataset& src) {
  if (dst.size() == 0) {
    dst = src;
    return;
  }
  dst.images.insert(dst.images.end(), src.images.begin(), src.images.end());
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

}  // namespace

Dataset read_cifar10_binary(const std::string& path, std::size_t limit) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  constexpr float kMean[3] = {0.4914f, 0.4822f, 0.4465f};
  constexpr float kStd[3] = {0.2470f, 0.2435f, 0.2616f};
  const auto buf = read_file(path);
  if (buf.size() % kRecord != 0) {
    const std::size_t record = buf.size() / kRecord;
    throw DataError(path + ": record " + std::to_string(record) + " truncated at byte offset " +
                    std::to_string(record * kRecord) + " (file size " + std::to_string(buf.size()) + ")");
  }
  std::size_t n = buf.size() / kRecord;
  if (limit != 0) n = std::min(n, limit);
  Dataset d;
  d.sample = {1, 3, 32, 32};
  d.classes = 10;
  d.images.resize(n * kPixels);
  d.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * kRecord;
    const int label = buf[off];
    if (label > 9)
      throw DataError(path + ": record " + std::to_string(r) + " has label " + std::to_string(label) +
                      " at byte offset " + std::to_string(off));
    d.labels[r] = label;
    for (std::size_t k = 0; k < kPixels; ++k) {
      const std::size_t ch = k / 1024;
      d.images[r * kPixels + k] = (static_cast<float>(buf[off + 1 + k]) / 255.0f - kMean[ch]) / kStd[ch];
    }
  }
  return d;
}

Dataset read_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const auto img_magic = read_be32(img, 0, images_path);
  if (img_magic != 0x00000803)
    throw DataError(images_path + ": bad magic at byte offset 0 (expected 0x00000803)");
  const auto lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801)
    throw DataError(labels_path + ": bad magic at byte offset 0 (expected 0x00000801)");
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t nl = read_be32(lab, 4, labels_path);
  if (n != nl) throw DataError(images_path + ": " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  if (rows != cols) throw DataError(images_path + ": non-square images are not supported");
  const std::size_t per = rows * cols;
  if (img.size() < 16 + n * per) {
    const std::size_t record = (img.size() - 16) / std::max<std::size_t>(per, 1);
    throw DataError(images_path + ": record " + std::to_string(record) + " truncated at byte offset " +
                    std::to_string(16 + record * per));
  }
  if (lab.size() < 8 + n)
    throw DataError(labels_path + ": record " + std::to_string(lab.size() - 8) + " truncated at byte offset " +
                    std::to_string(lab.size()));
  const std::size_t count = limit != 0 ? std::min(n, limit) : n;
  Dataset d;
  d.sample = {1, 1, rows, cols};
  d.images.resize(count * per);
  d.labels.resize(count);
  int max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
    for (std::size_t k = 0; k < per; ++k) d.images[i * per + k] = static_cast<float>(img[16 + i * per + k]) / 255.0f;
  }
  d.classes = static_cast<std::size_t>(std::max(max_label + 1, 10));
  return d;
}

DataSplit load_dataset(const DatasetSpec& spec) {
  DataSplit s;
  switch (spec.kind) {
    case DatasetKind::Gaussians:
      s.train = make_gaussians(spec.classes, spec.channels, spec.side, spec.train_size, spec.noise, spec.separation,
                               spec.seed, 0);
      s.test = make_gaussians(spec.classes, spec.channels, spec.side, spec.test_size, spec.noise, spec.separation,
                              spec.seed, 1);
      break;
    case DatasetKind::Spirals:
      s.train = make_spirals(spec.classes, spec.side, spec.train_size, spec.noise, spec.seed, 0);
      s.test = make_spirals(spec.classes, spec.side, spec.test_size, spec.noise, spec.seed, 1);
      break;
    case DatasetKind::Cifar10: {
      const auto files = split_list(spec.path);
      if (files.empty()) throw DataError("cifar10-binary: no training path given");
      for (const auto& f : files) append(s.train, read_cifar10_binary(f));
      if (spec.subset != 0 && s.train.size() > spec.subset) {
        s.train.labels.resize(spec.subset);
        s.train.images.resize(spec.subset * s.train.sample.per_sample());
      }
      if (spec.test_path.empty()) throw DataError("cifar10-binary: no test_path given");
      s.test = read_cifar10_binary(spec.test_path, spec.test_size);
      break;
    }
    case DatasetKind::Idx: {
      s.train = read_idx(spec.path, spec.label_path, spec.subset);
      const auto test = split_list(spec.test_path);
      if (test.size() != 2) throw DataError("idx-images: test_path must be 'images,labels'");
      s.test = read_idx(test[0], test[1], spec.test_size);
      break;
    }
  }
  return s;
}

BatchStream::BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
    : data_(&data), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw std::invalid_argument("BatchStream: batch size must be positive");
  batches_per_epoch_ = data.size() / batch_size;
  if (batches_per_epoch_ == 0)
    throw std::invalid_argument("BatchStream: dataset of " + std::to_string(data.size()) +
                                " samples is smaller than one batch of " + std::to_string(batch_size));
  begin_epoch(0);
}

void BatchStream::begin_epoch(std::size_t e) {
  epoch_ = e;
  cursor_ = 0;
  order_.resize(data_->size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  Rng rng(derive_seed(seed_, "epoch", e));
  shuffle(order_.begin(), order_.end(), rng);
}

template <typename T>
bool BatchStream::next(Batch<T>& out) {
  if (cursor_ >= batches_per_epoch_) return false;
  out = gather<T>(*data_, std::span<const std::size_t>(order_.data() + cursor_ * batch_size_, batch_size_));
  ++cursor_;
  return true;
}

template <typename T>
Batch<T> BatchStream::next_cyclic() {
  Batch<T> b;
  if (!next(b)) {
    begin_epoch(epoch_ + 1);
    next(b);
  }
  return b;
}

template Batch<float> gather<float>(const Dataset&, std::span<const std::size_t>);
template Batch<double> gather<double>(const Dataset&, std::span<const std::size_t>);
template Batch<float> slice<float>(const Dataset&, std::size_t, std::size_t);
template Batch<double> slice<double>(const Dataset&, std::size_t, std::size_t);
template bool BatchStream::next<float>(Batch<float>&);
template bool BatchStream::next<double>(Batch<double>&);
template Batch<float> BatchStream::next_cyclic<float>();
template Batch<double> BatchStream::next_cyclic<double>();

}  // namespace dgl
