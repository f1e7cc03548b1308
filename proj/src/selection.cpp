#include "scal/selection.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace scal::selection {

namespace {

void require_size(std::size_t available, std::size_t k) {
  if (k > available) {
    throw Error(Errc::kPoolTooSmall,
                "asked for " + std::to_string(k) + " demonstrations from " + std::to_string(available) + " candidates");
  }
}

// Descending score, ties by lower index.
bool higher(const ScoredPick& a, const ScoredPick& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.index < b.index;
}

std::vector<ScoredPick> top_k(std::vector<ScoredPick> candidates, std::size_t k) {
  require_size(candidates.size(), k);
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(), higher);
  candidates.resize(k);
  return candidates;
}

std::vector<ScoredPick> scored(std::span<const double> scores, std::optional<std::size_t> exclude) {
  std::vector<ScoredPick> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (exclude && *exclude == i) continue;
    out.push_back({i, scores[i]});
  }
  return out;
}

std::vector<std::pair<std::string, std::size_t>> counts(std::span<const std::string> tokens) {
  std::map<std::string, std::size_t> m;
  for (const auto& t : tokens) ++m[t];
  return {m.begin(), m.end()};
}

std::size_t lookup(const std::vector<std::pair<std::string, std::size_t>>& sorted, const std::string& key) {
  const auto it = std::lower_bound(sorted.begin(), sorted.end(), key,
                                   [](const auto& entry, const std::string& k) { return entry.first < k; });
  return it != sorted.end() && it->first == key ? it->second : 0;
}

}  // namespace

void Pool::validate() const {
  if (embeddings.empty()) return;
  if (embeddings.size() != items.size()) throw Error(Errc::kDimMismatch, "embeddings do not align with pool items");
  for (const auto& e : embeddings) {
    if (e.size() != embeddings.front().size()) throw Error(Errc::kDimMismatch, "pool embeddings differ in dimension");
  }
}

std::vector<ScoredPick> select_random(const Pool& pool, std::size_t k, std::uint64_t seed,
                                      std::optional<std::size_t> exclude) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < pool.items.size(); ++i) {
    if (!exclude || *exclude != i) idx.push_back(i);
  }
  require_size(idx.size(), k);
  // Partial Fisher-Yates: the first k slots are a uniform sample in draw order.
  std::mt19937_64 rng(seed);
  std::vector<ScoredPick> out;
  for (std::size_t j = 0; j < k; ++j) {
    std::uniform_int_distribution<std::size_t> pick(j, idx.size() - 1);
    std::swap(idx[j], idx[pick(rng)]);
    out.push_back({idx[j], 0.0});
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      current += static_cast<char>(std::tolower(u));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Bm25Index::Bm25Index(std::span<const std::string> documents, double k1, double b) : k1_(k1), b_(b) {
  std::map<std::string, std::size_t> df;
  std::size_t total = 0;
  for (const auto& doc : documents) {
    const auto tokens = tokenize(doc);
    term_freqs_.push_back(counts(tokens));
    lengths_.push_back(tokens.size());
    total += tokens.size();
    for (const auto& [term, tf] : term_freqs_.back()) ++df[term];
  }
  doc_freq_.assign(df.begin(), df.end());
  avg_len_ = documents.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(documents.size());
}

std::vector<double> Bm25Index::scores(std::string_view query) const {
  const double n = static_cast<double>(term_freqs_.size());
  std::vector<double> out(term_freqs_.size(), 0.0);
  for (const auto& term : tokenize(query)) {
    const auto df = static_cast<double>(lookup(doc_freq_, term));
    if (df == 0.0) continue;
    const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    for (std::size_t d = 0; d < term_freqs_.size(); ++d) {
      const auto tf = static_cast<double>(lookup(term_freqs_[d], term));
      if (tf == 0.0) continue;
      const double norm = avg_len_ > 0.0 ? static_cast<double>(lengths_[d]) / avg_len_ : 0.0;
      out[d] += idf * tf * (k1_ + 1.0) / (tf + k1_ * (1.0 - b_ + b_ * norm));
    }
  }
  return out;
}

std::vector<ScoredPick> bm25_select(std::string_view query, const Bm25Index& index, std::size_t pool_size,
                                    std::size_t k, std::optional<std::size_t> exclude) {
  const auto s = index.scores(query);
  if (s.size() != pool_size) throw Error(Errc::kShapeMismatch, "BM25 index does not match the pool");
  return top_k(scored(s, exclude), k);
}

std::vector<ScoredPick> bm25_select(std::string_view query, const Pool& pool, std::size_t k,
                                    std::optional<std::size_t> exclude) {
  std::vector<std::string> docs;
  for (const auto& item : pool.items) docs.push_back(item.text);
  return bm25_select(query, Bm25Index(docs), docs.size(), k, exclude);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(Errc::kDimMismatch, "embedding dimensions differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<ScoredPick> topk_select(std::span<const double> query_embedding, const Pool& pool, std::size_t k,
                                    std::optional<std::size_t> exclude) {
  if (pool.embeddings.empty()) throw Error(Errc::kMissingEmbeddings, "top-k selection needs pool embeddings");
  pool.validate();
  std::vector<double> sims;
  for (const auto& e : pool.embeddings) sims.push_back(cosine(query_embedding, e));
  return top_k(scored(sims, exclude), k);
}

Ordering parse_ordering(std::string_view name) {
  if (name == "increase") return Ordering::kIncrease;
  if (name == "decrease") return Ordering::kDecrease;
  if (name == "ucurve") return Ordering::kUCurve;
  if (name == "ucurve-mirrored") return Ordering::kUCurveMirrored;
  throw Error(Errc::kConfigError, "ordering must be increase, decrease, ucurve, or ucurve-mirrored");
}

std::string_view ordering_name(Ordering ordering) noexcept {
  switch (ordering) {
    case Ordering::kIncrease: return "increase";
    case Ordering::kDecrease: return "decrease";
    case Ordering::kUCurve: return "ucurve";
    case Ordering::kUCurveMirrored: return "ucurve-mirrored";
  }
  return "?";
}

std::vector<ScoredPick> order(std::span<const ScoredPick> picks, Ordering ordering) {
  std::vector<ScoredPick> desc(picks.begin(), picks.end());
  std::stable_sort(desc.begin(), desc.end(), higher);
  switch (ordering) {
    case Ordering::kDecrease: return desc;
    case Ordering::kIncrease: return {desc.rbegin(), desc.rend()};
    case Ordering::kUCurve:
    case Ordering::kUCurveMirrored: {
      std::vector<ScoredPick> out(desc.size());
      std::size_t lo = 0, hi = desc.size();
      const bool end_first = ordering == Ordering::kUCurve;
      for (std::size_t r = 0; r < desc.size(); ++r) {
        if ((r % 2 == 0) == end_first) {
          out[--hi] = desc[r];
        } else {
          out[lo++] = desc[r];
        }
      }
      return out;
    }
  }
  return desc;
}

}  // namespace scal::selection
