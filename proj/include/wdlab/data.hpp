#pragma once

#include "wdlab/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace wdlab {

struct Dataset {
  Tensor x;                 // [n x d]
  std::vector<int> labels;  // values in [0, num_classes)
  int num_classes = 0;
  std::string name;
  std::optional<std::uint64_t> label_permutation_seed;

  Index size() const { return x.rows(); }
  Index dim() const { return x.cols(); }
};

/// Gaussian clusters with class means on the vertices of a centered, scaled
/// standard-basis simplex (requires classes <= dim). `spread` is the cluster
/// stddev; deterministic per seed.
Dataset make_blobs(int classes, int dim, int per_class, double spread,
                   std::uint64_t seed);

/// Replace the labels with a uniformly random permutation of themselves;
/// inputs and class counts are untouched.
Dataset shuffle_labels(const Dataset& d, std::uint64_t seed);

enum class ExternalFormat { CsvFeaturesLabel, IdxImages };

/// Load a dataset from disk.
///   CsvFeaturesLabel: header row of d feature columns then `label`.
///   IdxImages: big-endian IDX image file; the label file path is derived by
///   the conventional images->labels / idx3->idx1 renaming. Pixels are
///   flattened and scaled to [0, 1].
/// Malformed content reports the offending row/record index.
Dataset load_external(const std::string& path, ExternalFormat format);

/// Write a dataset in the CsvFeaturesLabel schema.
void export_csv(const Dataset& d, const std::string& path);

/// Seeded epoch iterator: every sample appears in exactly one batch per
/// epoch; the final batch may be short.
class BatchIter {
 public:
  BatchIter(const Dataset& dataset, Index batch_size, std::uint64_t shuffle_seed);

  /// Reshuffle for `epoch` and reset to the first batch.
  void start_epoch(long epoch);

  /// Fill `x`/`labels` with the next batch; false at epoch end.
  bool next(Tensor& x, std::vector<int>& labels);

  /// Fold a would-be final batch of one sample into its predecessor, keeping
  /// batch-norm statistics defined while still visiting every sample.
  void avoid_singleton_final_batch(bool on) { avoid_singleton_ = on; }

  Index batches_per_epoch() const;

 private:
  const Dataset* dataset_;
  Index batch_size_;
  std::uint64_t seed_;
  std::vector<Index> order_;
  Index cursor_ = 0;
  bool avoid_singleton_ = false;
};

}  // namespace wdlab
