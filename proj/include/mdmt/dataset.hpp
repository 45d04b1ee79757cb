#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mdmt/errors.hpp"

namespace mdmt {

struct FieldDesc {
  std::string name;
  uint32_t vocab = 0;  // includes the reserved "unknown" id 0 for loaded data
  bool operator==(const FieldDesc&) const = default;
};

struct FeatureSpace {
  std::vector<FieldDesc> fields;
  uint32_t domain_count = 0;
  uint32_t task_count = 0;

  size_t field_count() const { return fields.size(); }
  bool operator==(const FeatureSpace&) const = default;
};

// Interaction log with columnar storage. Row i has one domain id,
// field_count() feature ids and task_count labels.
struct Dataset {
  FeatureSpace space;
  std::string split = "full";
  std::vector<uint16_t> domains;
  std::vector<uint32_t> features;  // size() * field_count(), row-major
  std::vector<uint8_t> labels;     // size() * task_count, row-major

  size_t size() const { return domains.size(); }

  std::span<const uint32_t> feature_row(size_t i) const {
    return {features.data() + i * space.field_count(), space.field_count()};
  }
  std::span<const uint8_t> label_row(size_t i) const {
    return {labels.data() + i * space.task_count, space.task_count};
  }

  void push_row(uint16_t domain, std::span<const uint32_t> feats,
                std::span<const uint8_t> labs);
  void validate() const;  // bounds-checks every row against the space

  bool operator==(const Dataset& o) const {
    return space == o.space && domains == o.domains && features == o.features &&
           labels == o.labels;
  }
};

// Column-name mapping for CSV ingestion.
struct CsvSchema {
  std::string domain_col;
  std::vector<std::string> label_cols;
  std::vector<std::string> feature_cols;
};

// Loads a UTF-8 CSV with header row. Vocabularies are built from the
// observed values with dense reindexing; id 0 of every feature field is
// reserved for unknown values seen only at eval time.
Dataset load_interactions(const std::string& path, const CsvSchema& schema);

// Deterministic per-domain stratified split (stratified by domain and label
// pattern). Ratios must be positive and sum to 1 within 1e-9.
std::array<Dataset, 3> split_dataset(const Dataset& ds, std::array<double, 3> ratios,
                                     uint64_t seed);

struct SyntheticSpec {
  uint32_t domain_count = 3;
  uint32_t task_count = 2;
  std::vector<FieldDesc> fields;          // >= 2; fields[0]/fields[1] drive labels
  std::vector<uint64_t> samples_per_domain;
  uint32_t latent_dim = 8;
  double rho_domain = 0.8;  // weight of the shared factor in each domain mixture
  double rho_task = 0.8;    // weight of the shared head in each task mixture
  double noise = 0.1;       // label flip rate
  uint64_t seed = 1;

  void validate() const;
};

// Planted-factor generator: per-domain user/item factors are convex mixtures
// of a shared factor (weight rho_domain) and a domain-private factor; task
// scores mix a shared head (weight rho_task) with task-private heads. Labels
// threshold the logistic probability at 0.5 and are then flipped with the
// noise rate. Bit-reproducible for a given spec.
Dataset generate_synthetic(const SyntheticSpec& spec);

// Binary dataset cache ("MDMTDS1" container).
void save_dataset_cache(const Dataset& ds, const std::string& path);
Dataset load_dataset_cache(const std::string& path);

struct Batch {
  uint16_t domain = 0;
  std::vector<uint32_t> rows;  // indices into the dataset
};

// Domain-homogeneous batches covering every sample exactly once, shuffled
// deterministically by (seed, epoch) and interleaved across domains in
// proportion to domain sizes.
std::vector<Batch> epoch_batches(const Dataset& ds, size_t batch_size, uint64_t seed,
                                 uint64_t epoch);

// Row indices per domain, in row order.
std::vector<std::vector<uint32_t>> rows_by_domain(const Dataset& ds);

}  // namespace mdmt
