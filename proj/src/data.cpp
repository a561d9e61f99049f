#include "wdlab/data.hpp"

#include "wdlab/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace wdlab {

Dataset make_blobs(int classes, int dim, int per_class, double spread,
                   std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("make_blobs: classes must be >= 2");
  if (dim < classes)
    throw std::invalid_argument("make_blobs: dim must be >= classes for simplex means");
  if (per_class < 1) throw std::invalid_argument("make_blobs: per_class must be >= 1");
  if (spread < 0.0) throw std::invalid_argument("make_blobs: spread must be >= 0");

  constexpr double kMeanScale = 3.0;
  Rng rng(seed);
  const Index n = static_cast<Index>(classes) * per_class;

  Dataset d;
  d.x = Tensor({n, dim});
  d.labels.resize(static_cast<std::size_t>(n));
  d.num_classes = classes;
  d.name = "blobs";

  // Classes are interleaved row-wise so any contiguous slice of the dataset
  // is class-mixed (sequential batching with batch statistics depends on it).
  for (Index row = 0; row < n; ++row) {
    const int c = static_cast<int>(row % classes);
    for (Index j = 0; j < dim; ++j) {
      double mean = (j < classes) ? -kMeanScale / classes : 0.0;
      if (j == c) mean += kMeanScale;
      d.x.at(row, j) = mean + spread * rng.normal();
    }
    d.labels[static_cast<std::size_t>(row)] = c;
  }
  return d;
}

Dataset shuffle_labels(const Dataset& d, std::uint64_t seed) {
  Dataset out = d;
  Rng rng(seed);
  rng.shuffle(out.labels);
  out.label_permutation_seed = seed;
  out.name = d.name + "/shuffled";
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_external: cannot open " + path);

  std::string line;
  if (!std::getline(in, line) || line.empty())
    throw std::runtime_error("load_external: " + path + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < 2 || header.back() != "label")
    throw std::runtime_error("load_external: " + path +
                             ": header must end with a 'label' column");
  const Index d = static_cast<Index>(header.size()) - 1;

  std::vector<double> values;
  std::vector<int> labels;
  long row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (static_cast<Index>(fields.size()) != d + 1)
      throw std::runtime_error("load_external: " + path + ": row " +
                               std::to_string(row) + " has " +
                               std::to_string(fields.size()) + " fields, want " +
                               std::to_string(d + 1));
    try {
      std::size_t pos = 0;
      for (Index j = 0; j < d; ++j) {
        const std::string& f = fields[static_cast<std::size_t>(j)];
        values.push_back(std::stod(f, &pos));
        if (pos != f.size()) throw std::invalid_argument(f);
      }
      labels.push_back(std::stoi(fields.back(), &pos));
      if (pos != fields.back().size()) throw std::invalid_argument(fields.back());
    } catch (const std::exception&) {
      throw std::runtime_error("load_external: " + path + ": row " +
                               std::to_string(row) + ": unparsable number");
    }
  }
  if (labels.empty())
    throw std::runtime_error("load_external: " + path + ": no data rows");

  const Index n = static_cast<Index>(labels.size());
  Dataset out;
  out.x = Tensor({n, d});
  for (Index i = 0; i < n * d; ++i) out.x[i] = values[static_cast<std::size_t>(i)];
  out.labels = std::move(labels);

  int max_label = 0;
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    if (out.labels[i] < 0)
      throw std::runtime_error("load_external: " + path + ": row " +
                               std::to_string(i + 1) + ": negative label");
    max_label = std::max(max_label, out.labels[i]);
  }
  out.num_classes = max_label + 1;
  out.name = path;
  return out;
}

std::uint32_t read_be32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("load_external: " + path + ": truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

std::string derive_idx_label_path(const std::string& images_path) {
  std::string p = images_path;
  auto replace = [&p](const std::string& from, const std::string& to) {
    const auto pos = p.find(from);
    if (pos != std::string::npos) p.replace(pos, from.size(), to);
  };
  replace("images", "labels");
  replace("idx3", "idx1");
  if (p == images_path) p = images_path + ".labels";
  return p;
}

Dataset load_idx(const std::string& images_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("load_external: cannot open " + images_path);
  if (read_be32(img, images_path) != 0x00000803u)
    throw std::runtime_error("load_external: " + images_path + ": not an idx3 image file");
  const Index n = read_be32(img, images_path);
  const Index rows = read_be32(img, images_path);
  const Index cols = read_be32(img, images_path);
  const Index d = rows * cols;

  const std::string labels_path = derive_idx_label_path(images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("load_external: cannot open label file " + labels_path);
  if (read_be32(lab, labels_path) != 0x00000801u)
    throw std::runtime_error("load_external: " + labels_path + ": not an idx1 label file");
  if (static_cast<Index>(read_be32(lab, labels_path)) != n)
    throw std::runtime_error("load_external: " + labels_path + ": item count mismatch");

  Dataset out;
  out.x = Tensor({n, d});
  std::vector<unsigned char> buf(static_cast<std::size_t>(d));
  for (Index i = 0; i < n; ++i) {
    img.read(reinterpret_cast<char*>(buf.data()), d);
    if (!img)
      throw std::runtime_error("load_external: " + images_path + ": truncated at record " +
                               std::to_string(i));
    for (Index j = 0; j < d; ++j)
      out.x.at(i, j) = static_cast<double>(buf[static_cast<std::size_t>(j)]) / 255.0;
  }

  out.labels.resize(static_cast<std::size_t>(n));
  int max_label = 0;
  for (Index i = 0; i < n; ++i) {
    unsigned char l;
    lab.read(reinterpret_cast<char*>(&l), 1);
    if (!lab)
      throw std::runtime_error("load_external: " + labels_path + ": truncated at record " +
                               std::to_string(i));
    out.labels[static_cast<std::size_t>(i)] = l;
    max_label = std::max(max_label, int(l));
  }
  out.num_classes = max_label + 1;
  out.name = images_path;
  return out;
}

}  // namespace

Dataset load_external(const std::string& path, ExternalFormat format) {
  switch (format) {
    case ExternalFormat::CsvFeaturesLabel:
      return load_csv(path);
    case ExternalFormat::IdxImages:
      return load_idx(path);
  }
  throw std::logic_error("load_external: unknown format");
}

void export_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_csv: cannot open " + path);
  for (Index j = 0; j < d.dim(); ++j) out << "f" << j << ",";
  out << "label\n";
  char buf[32];
  for (Index i = 0; i < d.size(); ++i) {
    for (Index j = 0; j < d.dim(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", d.x.at(i, j));
      out << buf << ",";
    }
    out << d.labels[static_cast<std::size_t>(i)] << "\n";
  }
  if (!out) throw std::runtime_error("export_csv: write failed for " + path);
}

BatchIter::BatchIter(const Dataset& dataset, Index batch_size,
                     std::uint64_t shuffle_seed)
    : dataset_(&dataset), batch_size_(batch_size), seed_(shuffle_seed),
      order_(static_cast<std::size_t>(dataset.size())) {
  if (batch_size_ < 1) throw std::invalid_argument("BatchIter: batch_size must be >= 1");
  std::iota(order_.begin(), order_.end(), Index{0});
  cursor_ = dataset.size();  // exhausted until start_epoch
}

void BatchIter::start_epoch(long epoch) {
  std::iota(order_.begin(), order_.end(), Index{0});
  Rng rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order_);
  cursor_ = 0;
}

bool BatchIter::next(Tensor& x, std::vector<int>& labels) {
  const Index n = dataset_->size();
  if (cursor_ >= n) return false;
  Index take = std::min(batch_size_, n - cursor_);
  if (avoid_singleton_ && n - cursor_ - take == 1) take += 1;
  const Index d = dataset_->dim();

  x = Tensor({take, d});
  labels.resize(static_cast<std::size_t>(take));
  for (Index i = 0; i < take; ++i) {
    const Index src = order_[static_cast<std::size_t>(cursor_ + i)];
    for (Index j = 0; j < d; ++j) x.at(i, j) = dataset_->x.at(src, j);
    labels[static_cast<std::size_t>(i)] = dataset_->labels[static_cast<std::size_t>(src)];
  }
  cursor_ += take;
  return true;
}

Index BatchIter::batches_per_epoch() const {
  return (dataset_->size() + batch_size_ - 1) / batch_size_;
}

}  // namespace wdlab
