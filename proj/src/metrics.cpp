#include "mdmt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

#include "mdmt/io_util.hpp"

namespace mdmt {

double auc(std::span<const double> scores, std::span<const uint8_t> labels) {
  if (scores.size() != labels.size()) throw ValidationError("auc: scores/labels length mismatch");
  const size_t n = scores.size();
  size_t pos = 0;
  for (uint8_t y : labels) {
    if (y > 1) throw ValidationError("auc: label outside {0,1}");
    pos += y;
  }
  const size_t neg = n - pos;
  if (pos == 0 || neg == 0) {
    throw ValidationError("auc undefined: only one label class present");
  }
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    return scores[a] != scores[b] ? scores[a] < scores[b] : a < b;
  });
  // Average ranks across tie groups, then the Mann-Whitney identity.
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

double logloss(std::span<const double> scores, std::span<const uint8_t> labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw ValidationError("logloss: empty input or length mismatch");
  }
  double total = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    double p = std::clamp(scores[i], 1e-7, 1.0 - 1e-7);
    total += labels[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(scores.size());
}

double rela_impr(double auc_model, double auc_base) {
  if (auc_base <= 0.5) {
    throw ValidationError("rela_impr undefined: baseline AUC must exceed the 0.5 chance level");
  }
  return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0;
}

void EvalReport::finalize() {
  double sa = 0.0, sl = 0.0;
  size_t present = 0;
  n_samples = 0;
  for (const auto& p : pairs) {
    n_samples += p.n_samples;
    if (!p.present) continue;
    sa += p.auc;
    sl += p.logloss;
    ++present;
  }
  if (present == 0) throw ValidationError("evaluate: no (domain, task) pair had both classes");
  overall_auc = sa / static_cast<double>(present);
  overall_logloss = sl / static_cast<double>(present);
}

std::string render_report(const EvalReport& report) {
  std::ostringstream out;
  for (const auto& p : report.pairs) {
    out << "split=" << report.split << " domain=" << p.domain << " task=" << p.task;
    if (p.present) {
      out << " auc=" << format_double(p.auc) << " logloss=" << format_double(p.logloss);
    } else {
      out << " auc=absent logloss=absent";
    }
    out << " n_samples=" << p.n_samples << "\n";
  }
  out << "split=" << report.split << " domain=overall task=overall auc="
      << format_double(report.overall_auc) << " logloss=" << format_double(report.overall_logloss)
      << " n_samples=" << report.n_samples << "\n";
  return out.str();
}

namespace {

std::string field_value(const std::string& line, const std::string& key) {
  const std::string probe = key + "=";
  size_t at = line.find(probe);
  if (at == std::string::npos) throw IoError("report line missing field '" + key + "'");
  at += probe.size();
  const size_t end = line.find(' ', at);
  return line.substr(at, end == std::string::npos ? std::string::npos : end - at);
}

}  // namespace

EvalReport parse_report(const std::string& text) {
  EvalReport r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    r.split = field_value(line, "split");
    const std::string d = field_value(line, "domain");
    if (d == "overall") {
      r.overall_auc = std::stod(field_value(line, "auc"));
      r.overall_logloss = std::stod(field_value(line, "logloss"));
      r.n_samples = std::stoull(field_value(line, "n_samples"));
      continue;
    }
    PairMetrics p;
    p.domain = static_cast<uint32_t>(std::stoul(d));
    p.task = static_cast<uint32_t>(std::stoul(field_value(line, "task")));
    const std::string a = field_value(line, "auc");
    p.present = a != "absent";
    if (p.present) {
      p.auc = std::stod(a);
      p.logloss = std::stod(field_value(line, "logloss"));
    }
    p.n_samples = std::stoull(field_value(line, "n_samples"));
    r.pairs.push_back(p);
  }
  return r;
}

int eval_thread_cap() {
  const char* env = std::getenv("MDMT_THREADS");
  if (env == nullptr) return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

EvalReport evaluate(Model<float>& model, const Dataset& split, int max_threads) {
  if (split.size() == 0) throw ValidationError("evaluate: empty split");
  const uint32_t D = split.space.domain_count;
  const uint32_t T = split.space.task_count;

  // Per-domain scoring; forward on immutable parameters is read-only, so
  // domains fan out across threads and merge in fixed pair order.
  auto by_domain = rows_by_domain(split);
  std::vector<std::vector<std::vector<double>>> scores(D);  // [d][t][sample]
  for (uint32_t d = 0; d < D; ++d) scores[d].resize(T);

  auto score_domain = [&](uint32_t d) {
    const auto& rows = by_domain[d];
    if (rows.empty()) return;
    for (uint32_t t = 0; t < T; ++t) scores[d][t].reserve(rows.size());
    constexpr size_t kEvalBatch = 1024;
    for (size_t at = 0; at < rows.size(); at += kEvalBatch) {
      const size_t len = std::min(kEvalBatch, rows.size() - at);
      std::span<const uint32_t> slice(rows.data() + at, len);
      Tensor<float> pred =
          forward<float>(nullptr, model, split, slice, static_cast<uint16_t>(d));
      for (size_t i = 0; i < len; ++i) {
        for (uint32_t t = 0; t < T; ++t) {
          scores[d][t].push_back(static_cast<double>(pred.values(static_cast<Eigen::Index>(i), t)));
        }
      }
    }
  };

  int cap = max_threads > 0 ? max_threads : eval_thread_cap();
  cap = std::min<int>(cap, static_cast<int>(D));
  if (cap <= 1) {
    for (uint32_t d = 0; d < D; ++d) score_domain(d);
  } else {
    std::vector<std::thread> workers;
    std::atomic<uint32_t> next{0};
    for (int w = 0; w < cap; ++w) {
      workers.emplace_back([&]() {
        for (uint32_t d = next.fetch_add(1); d < D; d = next.fetch_add(1)) score_domain(d);
      });
    }
    for (auto& t : workers) t.join();
  }

  EvalReport report;
  report.split = split.split;
  for (uint32_t d = 0; d < D; ++d) {
    std::vector<std::vector<uint8_t>> labels(T);
    for (uint32_t row : by_domain[d]) {
      const auto labs = split.label_row(row);
      for (uint32_t t = 0; t < T; ++t) labels[t].push_back(labs[t]);
    }
    for (uint32_t t = 0; t < T; ++t) {
      PairMetrics p;
      p.domain = d;
      p.task = t;
      p.n_samples = labels[t].size();
      if (!labels[t].empty()) {
        try {
          p.auc = auc(scores[d][t], labels[t]);
          p.logloss = logloss(scores[d][t], labels[t]);
          p.present = true;
        } catch (const ValidationError&) {
          p.present = false;  // single-class pair: reported absent, not 0
        }
      }
      report.pairs.push_back(p);
    }
  }
  report.finalize();
  return report;
}

// --- statistics ------------------------------------------------------------

double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_std(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

namespace {

// Continued fraction for the incomplete beta function (Lentz's method).
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * betacf(a, b, x) / a;
  }
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

std::optional<WelchResult> welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) return std::nullopt;
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = sample_std(a), sb = sample_std(b);
  const double va = sa * sa / na, vb = sb * sb / nb;
  if (va + vb == 0.0) return std::nullopt;  // degenerate: zero variance on both sides
  WelchResult r;
  r.t = (mean_of(a) - mean_of(b)) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) /
         (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  // Two-sided p via the t tail identity p = I_{df/(df+t^2)}(df/2, 1/2).
  r.p_two_sided = incomplete_beta(r.df / 2.0, 0.5, r.df / (r.df + r.t * r.t));
  return r;
}

}  // namespace mdmt
