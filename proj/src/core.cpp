#include "scal/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace scal {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::kInvalidArgument: return "InvalidArgument";
    case Errc::kAllZeroMass: return "AllZeroMass";
    case Errc::kTemplateError: return "TemplateError";
    case Errc::kDuplicateFirstToken: return "DuplicateFirstToken";
    case Errc::kEmptyToken: return "EmptyToken";
    case Errc::kZeroEvidence: return "ZeroEvidence";
    case Errc::kEmptyContext: return "EmptyContext";
    case Errc::kShapeMismatch: return "ShapeMismatch";
    case Errc::kEmptyTrainingSet: return "EmptyTrainingSet";
    case Errc::kLabelSpaceMismatch: return "LabelSpaceMismatch";
    case Errc::kEmptyBatch: return "EmptyBatch";
    case Errc::kInsufficientSupport: return "InsufficientSupport";
    case Errc::kUnknownMethod: return "UnknownMethod";
    case Errc::kPoolTooSmall: return "PoolTooSmall";
    case Errc::kMissingEmbeddings: return "MissingEmbeddings";
    case Errc::kDimMismatch: return "DimMismatch";
    case Errc::kBackendError: return "BackendError";
    case Errc::kMissingLabelToken: return "MissingLabelToken";
    case Errc::kCacheMiss: return "CacheMiss";
    case Errc::kIoError: return "IoError";
    case Errc::kParseError: return "ParseError";
    case Errc::kLengthMismatch: return "LengthMismatch";
    case Errc::kDegenerateInput: return "DegenerateInput";
    case Errc::kConfigError: return "ConfigError";
    case Errc::kMismatchedIds: return "MismatchedIds";
  }
  return "Unknown";
}

// ---------------------------------------------------------------------------
// LabelSpace

void validate_verbalizer(std::span<const std::string> verbalizer_tokens) {
  std::set<std::string> seen;
  for (const auto& token : verbalizer_tokens) {
    if (token.empty()) throw Error(Errc::kEmptyToken, "verbalizer token is empty");
    if (!seen.insert(token).second) {
      throw Error(Errc::kDuplicateFirstToken, "first token '" + token + "' is shared by two labels");
    }
  }
}

LabelSpace LabelSpace::make(std::vector<std::string> labels, std::vector<std::string> verbalizer) {
  if (labels.size() < 2) throw Error(Errc::kInvalidArgument, "label space needs at least 2 labels");
  if (verbalizer.size() != labels.size()) {
    throw Error(Errc::kShapeMismatch, "verbalizer must have one token per label");
  }
  if (std::set<std::string>(labels.begin(), labels.end()).size() != labels.size()) {
    throw Error(Errc::kInvalidArgument, "labels must be distinct");
  }
  validate_verbalizer(verbalizer);
  LabelSpace space;
  space.labels_ = std::move(labels);
  space.verbalizer_ = std::move(verbalizer);
  return space;
}

LabelSpace LabelSpace::generic(std::size_t num_classes) {
  std::vector<std::string> names;
  for (std::size_t c = 0; c < num_classes; ++c) names.push_back("label_" + std::to_string(c));
  return make(names, names);
}

// ---------------------------------------------------------------------------
// LabelDistribution

LabelDistribution LabelDistribution::from_probs(std::vector<double> probs) {
  if (probs.empty()) throw Error(Errc::kInvalidArgument, "empty distribution");
  double sum = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
      throw Error(Errc::kInvalidArgument, "probability outside [0,1]");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(Errc::kInvalidArgument, "probabilities do not sum to 1");
  return LabelDistribution(std::move(probs));
}

std::vector<double> LabelDistribution::log_probs() const {
  std::vector<double> out(probs_.size());
  std::transform(probs_.begin(), probs_.end(), out.begin(), [](double p) { return std::log(p); });
  return out;
}

LabelDistribution normalize_over_labels(std::span<const double> raw) {
  if (raw.empty()) throw Error(Errc::kInvalidArgument, "no label masses");
  double max_mass = 0.0;
  for (double m : raw) {
    if (!std::isfinite(m) || m < 0.0) throw Error(Errc::kInvalidArgument, "label mass must be finite and >= 0");
    max_mass = std::max(max_mass, m);
  }
  if (max_mass == 0.0) throw Error(Errc::kAllZeroMass, "backend returned no mass on any label token");

  const double floor = kProbFloor * max_mass;
  std::vector<double> probs(raw.size());
  double z = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    probs[i] = std::max(raw[i], floor);
    z += probs[i];
  }
  for (double& p : probs) p /= z;
  return LabelDistribution(std::move(probs));
}

LabelDistribution softmax_distribution(std::span<const double> logits) {
  if (logits.empty()) throw Error(Errc::kInvalidArgument, "empty logits");
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> mass(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) mass[i] = std::exp(logits[i] - top);
  return normalize_over_labels(mass);
}

LabelIndex argmax_label(std::span<const double> scores) {
  LabelIndex best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Episode

void Episode::validate() const {
  const std::size_t c = labels.size();
  if (demo_dists.size() != demos.size()) {
    throw Error(Errc::kShapeMismatch, "episode " + id + ": demo_dists and demos differ in length");
  }
  for (const auto& demo : demos) {
    if (!demo.label) throw Error(Errc::kInvalidArgument, "episode " + id + ": demonstration without label");
    if (*demo.label >= c) throw Error(Errc::kInvalidArgument, "episode " + id + ": demo label out of range");
  }
  if (query.label && *query.label >= c) {
    throw Error(Errc::kInvalidArgument, "episode " + id + ": query label out of range");
  }
  for (const auto& d : demo_dists) {
    if (d.size() != c) throw Error(Errc::kShapeMismatch, "episode " + id + ": distribution width != C");
  }
  if (query_dist.size() != c) throw Error(Errc::kShapeMismatch, "episode " + id + ": query_dist width != C");
}

// ---------------------------------------------------------------------------
// Prompt assembly

namespace {

constexpr std::string_view kInput = "{input}";
constexpr std::string_view kLabel = "{label}";

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t count = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++count;
  }
  return count;
}

// Substitutes placeholders by their position in the template, so text that
// itself contains "{label}" is never re-expanded.
std::string render(std::string_view format, std::string_view input, std::string_view label) {
  std::string out;
  std::size_t pos = 0;
  while (pos < format.size()) {
    if (format.substr(pos).starts_with(kInput)) {
      out += input;
      pos += kInput.size();
    } else if (format.substr(pos).starts_with(kLabel)) {
      out += label;
      pos += kLabel.size();
    } else {
      out += format[pos++];
    }
  }
  return out;
}

}  // namespace

void PromptTemplate::validate() const {
  if (delimiter.empty()) throw Error(Errc::kTemplateError, "delimiter is empty");
  if (count_occurrences(demo_format, kInput) != 1 || count_occurrences(demo_format, kLabel) != 1) {
    throw Error(Errc::kTemplateError, "demo_format needs {input} and {label} exactly once");
  }
  if (count_occurrences(query_format, kInput) != 1) {
    throw Error(Errc::kTemplateError, "query_format needs {input} exactly once");
  }
  if (!query_format.ends_with(delimiter)) {
    throw Error(Errc::kTemplateError, "query_format must end with the delimiter");
  }
  const auto head = std::string_view(demo_format).substr(0, demo_format.find(kLabel));
  if (head.rfind(delimiter) == std::string_view::npos) {
    throw Error(Errc::kTemplateError, "no delimiter before {label} in demo_format");
  }
}

AssembledPrompt assemble_prompt(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                const std::string& query_text, const LabelSpace& labels) {
  tmpl.validate();
  const std::string_view demo_format = tmpl.demo_format;
  const auto label_pos = demo_format.find(kLabel);
  // Everything up to and including the last delimiter before {label}.
  const auto head = demo_format.substr(0, demo_format.substr(0, label_pos).rfind(tmpl.delimiter) +
                                              tmpl.delimiter.size());

  AssembledPrompt out;
  for (const auto& demo : demos) {
    if (!demo.label || *demo.label >= labels.size()) {
      throw Error(Errc::kInvalidArgument, "demonstration label missing or out of range");
    }
    out.cut_points.push_back(out.text.size() + render(head, demo.text, {}).size());
    out.text += render(demo_format, demo.text, labels.labels()[*demo.label]);
  }
  out.text += render(tmpl.query_format, query_text, {});
  out.cut_points.push_back(out.text.size());
  return out;
}

}  // namespace scal
