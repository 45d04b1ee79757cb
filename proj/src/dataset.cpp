#include "mdmt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "mdmt/io_util.hpp"
#include "mdmt/rng.hpp"

namespace mdmt {

void Dataset::push_row(uint16_t domain, std::span<const uint32_t> feats,
                       std::span<const uint8_t> labs) {
  if (feats.size() != space.field_count() || labs.size() != space.task_count) {
    throw ValidationError("push_row: row arity does not match the feature space");
  }
  domains.push_back(domain);
  features.insert(features.end(), feats.begin(), feats.end());
  labels.insert(labels.end(), labs.begin(), labs.end());
}

void Dataset::validate() const {
  if (space.domain_count < 1 || space.task_count < 1) {
    throw ValidationError("feature space needs at least one domain and one task");
  }
  for (const auto& f : space.fields) {
    if (f.vocab < 1) throw ValidationError("field '" + f.name + "' has empty vocabulary");
  }
  for (size_t i = 0; i < size(); ++i) {
    if (domains[i] >= space.domain_count) {
      throw ValidationError("row " + std::to_string(i) + ": domain id " +
                            std::to_string(domains[i]) + " out of range");
    }
    const auto feats = feature_row(i);
    for (size_t f = 0; f < feats.size(); ++f) {
      if (feats[f] >= space.fields[f].vocab) {
        throw ValidationError("row " + std::to_string(i) + ": feature id " +
                              std::to_string(feats[f]) + " exceeds vocab of field '" +
                              space.fields[f].name + "'");
      }
    }
    for (uint8_t y : label_row(i)) {
      if (y > 1) throw ValidationError("row " + std::to_string(i) + ": label outside {0,1}");
    }
  }
}

// --- CSV loading ------------------------------------------------------------

namespace {

// RFC-4180-ish row split: quoted fields, doubled quotes, embedded commas.
std::vector<std::string> split_csv_row(const std::string& line, size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) {
    throw ValidationError("line " + std::to_string(line_no) + ": unterminated quote");
  }
  out.push_back(std::move(cur));
  return out;
}

size_t find_column(const std::vector<std::string>& header, const std::string& name) {
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw ValidationError("missing column '" + name + "' in CSV header");
}

}  // namespace

Dataset load_interactions(const std::string& path, const CsvSchema& schema) {
  if (schema.domain_col.empty() || schema.label_cols.empty() || schema.feature_cols.empty()) {
    throw ValidationError("CSV schema needs a domain column, label columns and feature columns");
  }
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty CSV file: " + path);
  const auto header = split_csv_row(line, 1);

  const size_t domain_idx = find_column(header, schema.domain_col);
  std::vector<size_t> label_idx, feature_idx;
  for (const auto& c : schema.label_cols) label_idx.push_back(find_column(header, c));
  for (const auto& c : schema.feature_cols) feature_idx.push_back(find_column(header, c));

  const size_t F = feature_idx.size();
  const size_t T = label_idx.size();

  struct RawRow {
    std::string domain;
    std::vector<std::string> feats;
    std::vector<uint8_t> labs;
  };
  std::vector<RawRow> rows;
  std::set<std::string> domain_values;
  std::vector<std::set<std::string>> field_values(F);

  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_row(line, line_no);
    if (cells.size() != header.size()) {
      throw ValidationError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " columns, got " +
                            std::to_string(cells.size()));
    }
    RawRow r;
    r.domain = cells[domain_idx];
    domain_values.insert(r.domain);
    r.feats.reserve(F);
    for (size_t f = 0; f < F; ++f) {
      r.feats.push_back(cells[feature_idx[f]]);
      field_values[f].insert(cells[feature_idx[f]]);
    }
    r.labs.reserve(T);
    for (size_t t = 0; t < T; ++t) {
      const std::string& v = cells[label_idx[t]];
      if (v == "0") {
        r.labs.push_back(0);
      } else if (v == "1") {
        r.labs.push_back(1);
      } else {
        throw ValidationError("line " + std::to_string(line_no) + ": label value '" + v +
                              "' in column '" + schema.label_cols[t] + "' is not 0 or 1");
      }
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ValidationError("CSV has a header but no data rows: " + path);
  if (domain_values.size() > 65535) throw ValidationError("more than 65535 distinct domains");

  // Dense ids in sorted value order. Domains map to [0, D); feature fields
  // reserve id 0 for values unseen at load time.
  std::map<std::string, uint16_t> domain_id;
  for (const auto& v : domain_values) {
    domain_id.emplace(v, static_cast<uint16_t>(domain_id.size()));
  }
  std::vector<std::map<std::string, uint32_t>> field_id(F);
  Dataset ds;
  ds.space.domain_count = static_cast<uint32_t>(domain_id.size());
  ds.space.task_count = static_cast<uint32_t>(T);
  for (size_t f = 0; f < F; ++f) {
    uint32_t next = 1;
    for (const auto& v : field_values[f]) field_id[f].emplace(v, next++);
    ds.space.fields.push_back({schema.feature_cols[f], next});
  }

  ds.domains.reserve(rows.size());
  ds.features.reserve(rows.size() * F);
  ds.labels.reserve(rows.size() * T);
  std::vector<uint32_t> feats(F);
  for (const auto& r : rows) {
    for (size_t f = 0; f < F; ++f) feats[f] = field_id[f].at(r.feats[f]);
    ds.push_row(domain_id.at(r.domain), feats, r.labs);
  }
  return ds;
}

// --- splitting --------------------------------------------------------------

std::array<Dataset, 3> split_dataset(const Dataset& ds, std::array<double, 3> ratios,
                                     uint64_t seed) {
  double sum = 0;
  for (double r : ratios) {
    if (r <= 0) throw ValidationError("split ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");
  if (ds.size() == 0) throw ValidationError("cannot split an empty dataset");

  const size_t T = ds.space.task_count;
  // Strata keyed by (domain, label pattern); splitting each stratum with
  // largest-remainder apportionment keeps per-domain label means stable.
  std::map<std::pair<uint16_t, uint64_t>, std::vector<uint32_t>> strata;
  std::vector<size_t> domain_sizes(ds.space.domain_count, 0);
  for (size_t i = 0; i < ds.size(); ++i) {
    uint64_t pattern = 0;
    const auto labs = ds.label_row(i);
    for (size_t t = 0; t < T; ++t) pattern |= static_cast<uint64_t>(labs[t]) << t;
    strata[{ds.domains[i], pattern}].push_back(static_cast<uint32_t>(i));
    domain_sizes[ds.domains[i]]++;
  }
  for (uint32_t d = 0; d < ds.space.domain_count; ++d) {
    if (domain_sizes[d] > 0 && domain_sizes[d] < 3) {
      throw ValidationError("domain " + std::to_string(d) + " has only " +
                            std::to_string(domain_sizes[d]) +
                            " samples; cannot populate train/valid/test");
    }
  }

  std::array<std::vector<uint32_t>, 3> picks;
  auto apportion = [&ratios](size_t n) {
    std::array<size_t, 3> c{};
    std::array<double, 3> frac{};
    size_t used = 0;
    for (int s = 0; s < 3; ++s) {
      const double exact = n * ratios[s];
      c[s] = static_cast<size_t>(std::floor(exact));
      frac[s] = exact - static_cast<double>(c[s]);
      used += c[s];
    }
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return frac[a] != frac[b] ? frac[a] > frac[b] : a < b;
    });
    for (size_t k = 0; used + k < n; ++k) c[order[k % 3]]++;
    return c;
  };

  for (auto& [key, idx] : strata) {
    Rng rng(mix_seed(seed, key.first + 1, key.second + 1));
    rng.shuffle(idx);
    const auto counts = apportion(idx.size());
    size_t at = 0;
    for (int s = 0; s < 3; ++s) {
      picks[s].insert(picks[s].end(), idx.begin() + at, idx.begin() + at + counts[s]);
      at += counts[s];
    }
  }

  // Guarantee every non-empty domain lands in every split: move a sample
  // from that domain's largest split when one is empty.
  for (uint32_t d = 0; d < ds.space.domain_count; ++d) {
    if (domain_sizes[d] == 0) continue;
    for (int s = 0; s < 3; ++s) {
      auto count_in = [&](int split) {
        return std::count_if(picks[split].begin(), picks[split].end(),
                             [&](uint32_t i) { return ds.domains[i] == d; });
      };
      if (count_in(s) > 0) continue;
      int donor = 0;
      long best = -1;
      for (int o = 0; o < 3; ++o) {
        const long c = count_in(o);
        if (o != s && c > best) {
          best = c;
          donor = o;
        }
      }
      auto it = std::find_if(picks[donor].rbegin(), picks[donor].rend(),
                             [&](uint32_t i) { return ds.domains[i] == d; });
      picks[s].push_back(*it);
      picks[donor].erase(std::next(it).base());
    }
  }

  std::array<Dataset, 3> out;
  const char* names[3] = {"train", "valid", "test"};
  for (int s = 0; s < 3; ++s) {
    std::sort(picks[s].begin(), picks[s].end());
    out[s].space = ds.space;
    out[s].split = names[s];
    for (uint32_t i : picks[s]) {
      out[s].push_row(ds.domains[i], ds.feature_row(i), ds.label_row(i));
    }
  }
  return out;
}

// --- synthetic generation ----------------------------------------------------

void SyntheticSpec::validate() const {
  if (domain_count < 1) throw ValidationError("synthetic spec: domain_count must be >= 1");
  if (task_count < 1) throw ValidationError("synthetic spec: task_count must be >= 1");
  if (fields.size() < 2) {
    throw ValidationError("synthetic spec: needs at least 2 fields (user-like and item-like)");
  }
  for (const auto& f : fields) {
    if (f.vocab < 2) {
      throw ValidationError("synthetic spec: field '" + f.name +
                            "' needs vocab >= 2 (id 0 is reserved)");
    }
  }
  if (samples_per_domain.size() != domain_count) {
    throw ValidationError("synthetic spec: samples_per_domain must list every domain");
  }
  for (uint64_t c : samples_per_domain) {
    if (c < 1) throw ValidationError("synthetic spec: per-domain counts must be >= 1");
  }
  if (rho_domain < 0.0 || rho_domain > 1.0) {
    throw ValidationError("synthetic spec: rho_domain must be in [0,1]");
  }
  if (rho_task < 0.0 || rho_task > 1.0) {
    throw ValidationError("synthetic spec: rho_task must be in [0,1]");
  }
  if (noise < 0.0 || noise >= 0.5) {
    throw ValidationError("synthetic spec: noise must be in [0, 0.5)");
  }
  if (latent_dim < 1) throw ValidationError("synthetic spec: latent_dim must be >= 1");
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const uint32_t D = spec.domain_count;
  const uint32_t T = spec.task_count;
  const uint32_t K = spec.latent_dim;
  const uint64_t users = spec.fields[0].vocab;
  const uint64_t items = spec.fields[1].vocab;

  Rng rng(mix_seed(spec.seed, 0xD5EAu));

  // factors[id*K..] : shared block, then one private block per domain.
  auto draw_factors = [&](uint64_t vocab) {
    std::vector<double> f(vocab * K * (D + 1));
    for (auto& x : f) x = rng.normal();
    return f;
  };
  const std::vector<double> user_f = draw_factors(users);
  const std::vector<double> item_f = draw_factors(items);

  std::vector<double> head_shared(K), head_task(static_cast<size_t>(T) * K);
  for (auto& x : head_shared) x = rng.normal();
  for (auto& x : head_task) x = rng.normal();

  Dataset ds;
  ds.space.domain_count = D;
  ds.space.task_count = T;
  ds.space.fields = spec.fields;

  const double rd = spec.rho_domain;
  const double rt = spec.rho_task;
  std::vector<uint32_t> feats(spec.fields.size());
  std::vector<uint8_t> labs(T);
  std::vector<double> z(K);

  for (uint32_t d = 0; d < D; ++d) {
    for (uint64_t s = 0; s < spec.samples_per_domain[d]; ++s) {
      const uint64_t u = 1 + rng.uniform_index(users - 1);
      const uint64_t v = 1 + rng.uniform_index(items - 1);
      feats[0] = static_cast<uint32_t>(u);
      feats[1] = static_cast<uint32_t>(v);
      for (size_t f = 2; f < spec.fields.size(); ++f) {
        feats[f] = static_cast<uint32_t>(1 + rng.uniform_index(spec.fields[f].vocab - 1));
      }
      const double* us = &user_f[(u * (D + 1) + 0) * K];
      const double* ud = &user_f[(u * (D + 1) + 1 + d) * K];
      const double* is = &item_f[(v * (D + 1) + 0) * K];
      const double* id = &item_f[(v * (D + 1) + 1 + d) * K];
      for (uint32_t k = 0; k < K; ++k) {
        const double ue = rd * us[k] + (1.0 - rd) * ud[k];
        const double ie = rd * is[k] + (1.0 - rd) * id[k];
        z[k] = ue * ie;
      }
      for (uint32_t t = 0; t < T; ++t) {
        double score = 0.0;
        for (uint32_t k = 0; k < K; ++k) {
          const double w = rt * head_shared[k] + (1.0 - rt) * head_task[t * K + k];
          score += w * z[k];
        }
        score /= std::sqrt(static_cast<double>(K));
        const double p = 1.0 / (1.0 + std::exp(-score));
        bool y = p >= 0.5;
        if (rng.bernoulli(spec.noise)) y = !y;
        labs[t] = y ? 1 : 0;
      }
      ds.push_row(static_cast<uint16_t>(d), feats, labs);
    }
  }
  return ds;
}

// --- binary cache -------------------------------------------------------------

namespace {
constexpr char kDatasetMagic[8] = "MDMTDS1";  // 7 magic bytes + NUL sentinel
}

void save_dataset_cache(const Dataset& ds, const std::string& path) {
  ByteWriter w;
  w.put_bytes(kDatasetMagic, 7);
  w.put_u32(static_cast<uint32_t>(ds.space.field_count()));
  for (const auto& f : ds.space.fields) {
    w.put_string(f.name);
    w.put_u32(f.vocab);
  }
  w.put_u32(ds.space.domain_count);
  w.put_u32(ds.space.task_count);
  w.put_u64(ds.size());
  for (size_t i = 0; i < ds.size(); ++i) {
    w.put_u16(ds.domains[i]);
    for (uint32_t id : ds.feature_row(i)) w.put_u32(id);
    for (uint8_t y : ds.label_row(i)) w.put_u8(y);
  }
  write_file_bytes(path, w.buffer().data(), w.buffer().size());
}

Dataset load_dataset_cache(const std::string& path) {
  ByteReader r(read_file_bytes(path));
  char magic[7];
  r.get_bytes(magic, 7);
  if (std::string(magic, 7) != std::string(kDatasetMagic, 7)) {
    throw IoError("'" + path + "' is not a dataset cache (bad magic)");
  }
  Dataset ds;
  const uint32_t F = r.get_u32();
  for (uint32_t f = 0; f < F; ++f) {
    FieldDesc fd;
    fd.name = r.get_string();
    fd.vocab = r.get_u32();
    ds.space.fields.push_back(std::move(fd));
  }
  ds.space.domain_count = r.get_u32();
  ds.space.task_count = r.get_u32();
  const uint64_t n = r.get_u64();
  std::vector<uint32_t> feats(F);
  std::vector<uint8_t> labs(ds.space.task_count);
  for (uint64_t i = 0; i < n; ++i) {
    const uint16_t d = r.get_u16();
    for (uint32_t f = 0; f < F; ++f) feats[f] = r.get_u32();
    for (uint32_t t = 0; t < ds.space.task_count; ++t) labs[t] = r.get_u8();
    ds.push_row(d, feats, labs);
  }
  if (!r.at_end()) throw IoError("trailing bytes after dataset cache payload: " + path);
  ds.validate();
  return ds;
}

// --- batching ------------------------------------------------------------------

std::vector<std::vector<uint32_t>> rows_by_domain(const Dataset& ds) {
  std::vector<std::vector<uint32_t>> by_domain(ds.space.domain_count);
  for (size_t i = 0; i < ds.size(); ++i) {
    by_domain[ds.domains[i]].push_back(static_cast<uint32_t>(i));
  }
  return by_domain;
}

std::vector<Batch> epoch_batches(const Dataset& ds, size_t batch_size, uint64_t seed,
                                 uint64_t epoch) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (ds.size() == 0) throw ValidationError("cannot batch an empty dataset");

  struct Keyed {
    double key;
    Batch batch;
  };
  std::vector<Keyed> keyed;
  auto by_domain = rows_by_domain(ds);
  for (uint32_t d = 0; d < ds.space.domain_count; ++d) {
    auto& idx = by_domain[d];
    if (idx.empty()) continue;
    Rng rng(mix_seed(seed, epoch + 1, d + 1));
    rng.shuffle(idx);
    const size_t n_batches = (idx.size() + batch_size - 1) / batch_size;
    for (size_t b = 0; b < n_batches; ++b) {
      Batch batch;
      batch.domain = static_cast<uint16_t>(d);
      const size_t lo = b * batch_size;
      const size_t hi = std::min(idx.size(), lo + batch_size);
      batch.rows.assign(idx.begin() + lo, idx.begin() + hi);
      keyed.push_back({(static_cast<double>(b) + 0.5) / static_cast<double>(n_batches),
                       std::move(batch)});
    }
  }
  // Proportional interleave: batch j of a domain with B batches sits at
  // relative position (j+0.5)/B; merging by position spaces domains evenly.
  std::stable_sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.key != b.key ? a.key < b.key : a.batch.domain < b.batch.domain;
  });
  std::vector<Batch> out;
  out.reserve(keyed.size());
  for (auto& k : keyed) out.push_back(std::move(k.batch));
  return out;
}

}  // namespace mdmt
