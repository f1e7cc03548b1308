#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "scal/core.hpp"

namespace scal::selection {

struct Pool {
  std::vector<Demonstration> items;
  std::vector<std::vector<double>> embeddings;  // empty or aligned with items

  /// Throws DimMismatch when embeddings are misaligned or ragged.
  void validate() const;
};

struct ScoredPick {
  std::size_t index = 0;
  double score = 0.0;

  friend bool operator==(const ScoredPick&, const ScoredPick&) = default;
};

/// K distinct items, uniformly without replacement; score 0. Throws PoolTooSmall.
std::vector<ScoredPick> select_random(const Pool& pool, std::size_t k, std::uint64_t seed,
                                      std::optional<std::size_t> exclude = std::nullopt);

/// Lowercased alphanumeric runs.
std::vector<std::string> tokenize(std::string_view text);

/// Okapi BM25 index over a fixed document list (k1 = 1.5, b = 0.75,
/// idf = ln((N - df + 0.5) / (df + 0.5) + 1)).
class Bm25Index {
 public:
  explicit Bm25Index(std::span<const std::string> documents, double k1 = 1.5, double b = 0.75);

  /// Score of every document; query tokens are counted with multiplicity.
  std::vector<double> scores(std::string_view query) const;

 private:
  double k1_;
  double b_;
  double avg_len_ = 0.0;
  std::vector<std::vector<std::pair<std::string, std::size_t>>> term_freqs_;  // sorted per doc
  std::vector<std::size_t> lengths_;
  std::vector<std::pair<std::string, std::size_t>> doc_freq_;  // sorted
};

/// Top-K by BM25 score, descending, ties by index. Throws PoolTooSmall.
std::vector<ScoredPick> bm25_select(std::string_view query, const Pool& pool, std::size_t k,
                                    std::optional<std::size_t> exclude = std::nullopt);
std::vector<ScoredPick> bm25_select(std::string_view query, const Bm25Index& index, std::size_t pool_size,
                                    std::size_t k, std::optional<std::size_t> exclude = std::nullopt);

double cosine(std::span<const double> a, std::span<const double> b);

/// Top-K by cosine similarity, descending, ties by index. Throws
/// MissingEmbeddings, DimMismatch, PoolTooSmall.
std::vector<ScoredPick> topk_select(std::span<const double> query_embedding, const Pool& pool, std::size_t k,
                                    std::optional<std::size_t> exclude = std::nullopt);

enum class Ordering { kIncrease, kDecrease, kUCurve, kUCurveMirrored };

Ordering parse_ordering(std::string_view name);
std::string_view ordering_name(Ordering ordering) noexcept;

/// Increase: ascending score. Decrease: descending. U-curve: highest score
/// last, second-highest first, third second-to-last, and so on inward; the
/// mirrored variant swaps the two ends. Ties keep lower index as "higher".
std::vector<ScoredPick> order(std::span<const ScoredPick> picks, Ordering ordering);

}  // namespace scal::selection
