#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcr/remote.hpp"
#include "dcr/toy_diffusion.hpp"

namespace dcr {

// One encoded video frame. Width/height are after any resize; source_* before it.
struct Frame {
  std::string id;
  std::string mime = "image/png";
  std::vector<std::uint8_t> bytes;
  int width = 0;
  int height = 0;
  int source_width = 0;
  int source_height = 0;
};

// Width and height from a PNG or JPEG header.
std::optional<std::pair<int, int>> image_dimensions(std::span<const std::uint8_t> bytes);
// Reads an image file as a Frame; id is the file name, dimensions from the header.
Frame load_frame(const std::string& path);

// Target size that fits inside max_side x max_side with the aspect ratio kept.
std::pair<int, int> fit_preserving_aspect(int width, int height, int max_side);
// `count` indices spread evenly over [0, total), first and last included.
std::vector<std::size_t> uniform_frame_indices(std::size_t total, std::size_t count);

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::vector<double> embed_frame(const Frame& frame) = 0;
  virtual std::vector<double> embed_text(const std::string& text) = 0;
};

class CaptionProvider {
 public:
  virtual ~CaptionProvider() = default;
  virtual std::string caption(const Frame& frame) = 0;
};

// Hash-seeded unit vectors: equal inputs give equal vectors, frames and texts
// share a key space through `frame_key` (defaults to the frame id).
class StubEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit StubEmbeddingProvider(std::size_t dim = 64);
  std::vector<double> embed_frame(const Frame& frame) override;
  std::vector<double> embed_text(const std::string& text) override;
  std::vector<double> embed_key(const std::string& key) const;

 private:
  std::size_t dim_;
};

// Captions from a fixed frame-id map; unknown ids fail.
class StubCaptionProvider final : public CaptionProvider {
 public:
  explicit StubCaptionProvider(std::map<std::string, std::string> captions);
  std::string caption(const Frame& frame) override;

 private:
  std::map<std::string, std::string> captions_;
};

// {"input": {"text": ...} | {"image": {"mime", "data"(base64)}}} -> {"embedding": [...]}
class HttpEmbeddingProvider final : public EmbeddingProvider {
 public:
  HttpEmbeddingProvider(std::shared_ptr<JsonTransport> transport, std::string model,
                        RetryPolicy retry = {});
  std::vector<double> embed_frame(const Frame& frame) override;
  std::vector<double> embed_text(const std::string& text) override;

 private:
  std::vector<double> request(nlohmann::json input);
  std::shared_ptr<JsonTransport> transport_;
  std::string model_;
  RetryPolicy retry_;
};

// {"image": {...}} -> {"caption": "..."}
class HttpCaptionProvider final : public CaptionProvider {
 public:
  HttpCaptionProvider(std::shared_ptr<JsonTransport> transport, std::string model,
                      RetryPolicy retry = {});
  std::string caption(const Frame& frame) override;

 private:
  std::shared_ptr<JsonTransport> transport_;
  std::string model_;
  RetryPolicy retry_;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

double clip_alignment(std::span<const Frame> frames, const std::string& text,
                      EmbeddingProvider& provider);

struct AlignmentResult {
  double value = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
  std::vector<std::string> errors;
};

AlignmentResult caption_alignment(std::span<const Frame> frames, const std::string& prompt,
                                  CaptionProvider& captioner, EmbeddingProvider& provider);

double ccs(std::span<const int> scores);
double cvr(const std::vector<bool>& flags);
double toy_collapse_fraction(std::span<const std::vector<double>> latents,
                             const BiasScenario& scenario);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};
Interval wilson_interval(std::size_t successes, std::size_t n, double z = 1.959963984540054);

// Per-item metric values. Missing metrics stay empty and are not averaged.
struct MetricRow {
  std::string item_id;
  std::string group;  // category name for bench rows
  std::optional<double> clip_score;
  std::optional<double> clip_attr;
  std::optional<double> caption_alignment;
  std::optional<int> judge_score;
  std::optional<bool> collapsed;
  std::optional<double> collapse_fraction;
  std::optional<double> constraint_rate;
};

struct Stat {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single value
  std::size_t n = 0;
};

// Welford accumulator.
class RunningStat {
 public:
  void add(double x);
  Stat stat() const;
  std::size_t count() const { return n_; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

Stat mean_sd(std::span<const double> values);  // two-pass

struct GroupSummary {
  std::string group;  // "overall" or a category
  std::size_t n = 0;
  std::optional<Stat> clip_score;
  std::optional<Stat> clip_attr;
  std::optional<Stat> caption_alignment;
  std::optional<Stat> ccs;
  std::optional<Stat> cvr;
  std::optional<Stat> collapse_fraction;
  std::optional<Stat> constraint_rate;
};

struct ScoreReport {
  std::string method;
  std::vector<GroupSummary> groups;
  std::vector<std::string> notes;
  std::vector<MetricRow> rows;
};

enum class Grouping { Overall, ByCategory };

// ByCategory emits one summary per group present, then "overall". Groups listed
// in `expected_groups` that have no rows are omitted with a note.
ScoreReport aggregate_report(std::span<const MetricRow> rows, Grouping grouping,
                             const std::string& method = "",
                             const std::vector<std::string>& expected_groups = {});

inline constexpr const char* kReportSchema = "dcr-report/1";

// Columns: method, group, n, then <metric>, <metric>_sd for clip_score, clip_attr,
// caption_alignment, ccs, cvr, collapse_fraction, constraint_rate.
void write_report_csv(std::ostream& out, const std::vector<ScoreReport>& reports);
nlohmann::ordered_json report_to_json(const std::vector<ScoreReport>& reports,
                                      const std::string& manifest_ref = "");

}  // namespace dcr
