#include "dcr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <ostream>
#include <random>
#include <set>

namespace dcr {

std::optional<std::pair<int, int>> image_dimensions(std::span<const std::uint8_t> b) {
  auto be16 = [&](std::size_t i) { return (b[i] << 8) | b[i + 1]; };
  static const std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (b.size() >= 24 && std::equal(png_sig, png_sig + 8, b.begin())) {
    auto be32 = [&](std::size_t i) { return (b[i] << 24) | (b[i + 1] << 16) | (b[i + 2] << 8) | b[i + 3]; };
    return std::make_pair(static_cast<int>(be32(16)), static_cast<int>(be32(20)));
  }
  if (b.size() >= 4 && b[0] == 0xFF && b[1] == 0xD8) {
    std::size_t i = 2;
    while (i + 9 < b.size()) {
      if (b[i] != 0xFF) return std::nullopt;
      std::uint8_t marker = b[i + 1];
      if (marker == 0xFF) {
        ++i;
        continue;
      }
      std::size_t len = static_cast<std::size_t>(be16(i + 2));
      bool sof = marker >= 0xC0 && marker <= 0xCF && marker != 0xC4 && marker != 0xC8 && marker != 0xCC;
      if (sof) return std::make_pair(be16(i + 7), be16(i + 5));
      i += 2 + len;
    }
  }
  return std::nullopt;
}

Frame load_frame(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MetricError("cannot read frame '" + path + "'");
  Frame f;
  f.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  auto slash = path.find_last_of('/');
  f.id = slash == std::string::npos ? path : path.substr(slash + 1);
  auto dims = image_dimensions(f.bytes);
  if (!dims) throw MetricError("'" + path + "' is not a PNG or JPEG image");
  f.mime = f.bytes[0] == 0x89 ? "image/png" : "image/jpeg";
  f.width = f.source_width = dims->first;
  f.height = f.source_height = dims->second;
  return f;
}

std::pair<int, int> fit_preserving_aspect(int width, int height, int max_side) {
  if (width <= 0 || height <= 0 || max_side <= 0)
    throw ValidationError("frame dimensions must be positive");
  int longest = std::max(width, height);
  if (longest <= max_side) return {width, height};
  double scale = static_cast<double>(max_side) / longest;
  int w = std::max(1, static_cast<int>(std::lround(width * scale)));
  int h = std::max(1, static_cast<int>(std::lround(height * scale)));
  return {w, h};
}

std::vector<std::size_t> uniform_frame_indices(std::size_t total, std::size_t count) {
  if (total == 0 || count == 0) throw ValidationError("frame sampling needs frames and a count");
  count = std::min(count, total);
  std::vector<std::size_t> out;
  if (count == 1) return {0};
  for (std::size_t k = 0; k < count; ++k)
    out.push_back(static_cast<std::size_t>(
        std::llround(static_cast<double>(k) * static_cast<double>(total - 1) / (count - 1))));
  return out;
}

namespace {

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_vector(const std::vector<double>& v, const char* what) {
  if (v.empty()) throw MetricError(std::string(what) + ": empty embedding");
  double nn = 0.0;
  for (double x : v) {
    if (!std::isfinite(x)) throw MetricError(std::string(what) + ": non-finite embedding");
    nn += x * x;
  }
  if (nn == 0.0) throw MetricError(std::string(what) + ": zero embedding");
}

nlohmann::json image_json(const Frame& f) {
  return {{"mime", f.mime}, {"data", base64_encode(f.bytes)}, {"width", f.width}, {"height", f.height}};
}

}  // namespace

StubEmbeddingProvider::StubEmbeddingProvider(std::size_t dim) : dim_(dim) {
  if (dim_ == 0) throw ValidationError("stub embedding dimension must be positive");
}

std::vector<double> StubEmbeddingProvider::embed_key(const std::string& key) const {
  std::mt19937_64 rng(fnv1a64(key));
  std::normal_distribution<double> normal;
  std::vector<double> v(dim_);
  double nn = 0.0;
  for (double& x : v) {
    x = normal(rng);
    nn += x * x;
  }
  for (double& x : v) x /= std::sqrt(nn);
  return v;
}

std::vector<double> StubEmbeddingProvider::embed_frame(const Frame& frame) {
  return embed_key(frame.id);
}

std::vector<double> StubEmbeddingProvider::embed_text(const std::string& text) {
  return embed_key(text);
}

StubCaptionProvider::StubCaptionProvider(std::map<std::string, std::string> captions)
    : captions_(std::move(captions)) {}

std::string StubCaptionProvider::caption(const Frame& frame) {
  auto it = captions_.find(frame.id);
  if (it == captions_.end()) throw MetricError("no caption for frame '" + frame.id + "'");
  return it->second;
}

HttpEmbeddingProvider::HttpEmbeddingProvider(std::shared_ptr<JsonTransport> transport,
                                             std::string model, RetryPolicy retry)
    : transport_(std::move(transport)), model_(std::move(model)), retry_(std::move(retry)) {
  if (!transport_) throw ConfigError("embedding provider needs a transport");
}

std::vector<double> HttpEmbeddingProvider::request(nlohmann::json input) {
  nlohmann::json body{{"model", model_}, {"input", std::move(input)}};
  auto res = post_with_retries(*transport_, body, retry_);
  try {
    return res.at("embedding").get<std::vector<double>>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("embedding response lacks a numeric 'embedding' array");
  }
}

std::vector<double> HttpEmbeddingProvider::embed_frame(const Frame& frame) {
  return request({{"image", image_json(frame)}});
}

std::vector<double> HttpEmbeddingProvider::embed_text(const std::string& text) {
  return request({{"text", text}});
}

HttpCaptionProvider::HttpCaptionProvider(std::shared_ptr<JsonTransport> transport,
                                         std::string model, RetryPolicy retry)
    : transport_(std::move(transport)), model_(std::move(model)), retry_(std::move(retry)) {
  if (!transport_) throw ConfigError("caption provider needs a transport");
}

std::string HttpCaptionProvider::caption(const Frame& frame) {
  nlohmann::json body{{"model", model_}, {"image", image_json(frame)}};
  auto res = post_with_retries(*transport_, body, retry_);
  if (!res.contains("caption") || !res["caption"].is_string())
    throw FormatError("caption response lacks a 'caption' string");
  return res["caption"].get<std::string>();
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? tbl[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double na = std::sqrt(squared_norm(a)), nb = std::sqrt(squared_norm(b));
  if (na == 0.0 || nb == 0.0) throw MetricError("cosine of a zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double clip_alignment(std::span<const Frame> frames, const std::string& text,
                      EmbeddingProvider& provider) {
  if (frames.empty()) throw ValidationError("clip_alignment needs at least one frame");
  try {
    auto t = provider.embed_text(text);
    check_vector(t, "text");
    double sum = 0.0;
    for (const auto& f : frames) {
      auto e = provider.embed_frame(f);
      check_vector(e, "frame");
      sum += cosine_similarity(e, t);
    }
    return sum / static_cast<double>(frames.size());
  } catch (const MetricError&) {
    throw;
  } catch (const std::exception& e) {
    throw MetricError(std::string("embedding provider failed: ") + e.what());
  }
}

AlignmentResult caption_alignment(std::span<const Frame> frames, const std::string& prompt,
                                  CaptionProvider& captioner, EmbeddingProvider& provider) {
  if (frames.empty()) throw ValidationError("caption_alignment needs at least one frame");
  std::vector<double> p;
  try {
    p = provider.embed_text(prompt);
    check_vector(p, "prompt");
  } catch (const MetricError&) {
    throw;
  } catch (const std::exception& e) {
    throw MetricError(std::string("embedding provider failed: ") + e.what());
  }
  AlignmentResult res;
  double sum = 0.0;
  for (const auto& f : frames) {
    try {
      std::string cap = captioner.caption(f);
      if (cap.empty()) throw MetricError("empty caption");
      auto c = provider.embed_text(cap);
      check_vector(c, "caption");
      sum += cosine_similarity(c, p);
      ++res.used;
    } catch (const std::exception& e) {
      ++res.skipped;
      res.errors.push_back(f.id + ": " + e.what());
    }
  }
  if (res.used == 0) throw MetricError("captioning failed for every frame");
  res.value = sum / static_cast<double>(res.used);
  return res;
}

double ccs(std::span<const int> scores) {
  if (scores.empty()) throw ValidationError("ccs needs at least one score");
  long long sum = 0;
  for (int s : scores) {
    if (s < 1 || s > 5) throw ValidationError("judge score " + std::to_string(s) + " outside 1..5");
    sum += s;
  }
  return static_cast<double>(sum) / static_cast<double>(scores.size());
}

double cvr(const std::vector<bool>& flags) {
  if (flags.empty()) throw ValidationError("cvr needs at least one flag");
  std::size_t k = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
  return static_cast<double>(k) / static_cast<double>(flags.size());
}

double toy_collapse_fraction(std::span<const std::vector<double>> latents,
                             const BiasScenario& scenario) {
  if (latents.empty()) throw ValidationError("toy_collapse_fraction needs at least one latent");
  std::size_t k = 0;
  for (const auto& x : latents)
    if (mode_assignment(x, scenario) == scenario.dominant_index) ++k;
  return static_cast<double>(k) / static_cast<double>(latents.size());
}

Interval wilson_interval(std::size_t successes, std::size_t n, double z) {
  if (n == 0) throw ValidationError("wilson_interval needs n >= 1");
  if (successes > n) throw ValidationError("wilson_interval: successes exceed n");
  double nn = static_cast<double>(n);
  double p = static_cast<double>(successes) / nn;
  double z2 = z * z;
  double denom = 1.0 + z2 / nn;
  double centre = (p + z2 / (2.0 * nn)) / denom;
  double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

void RunningStat::add(double x) {
  ++n_;
  double d = x - mean_;
  mean_ += d / static_cast<double>(n_);
  m2_ += d * (x - mean_);
}

Stat RunningStat::stat() const {
  Stat s;
  s.n = n_;
  s.mean = mean_;
  s.sd = n_ > 1 ? std::sqrt(m2_ / static_cast<double>(n_ - 1)) : 0.0;
  return s;
}

Stat mean_sd(std::span<const double> values) {
  if (values.empty()) throw ValidationError("mean_sd needs at least one value");
  Stat s;
  s.n = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = s.n > 1 ? std::sqrt(ss / static_cast<double>(s.n - 1)) : 0.0;
  return s;
}

namespace {

void validate_row(const MetricRow& r) {
  auto in_unit = [&](const std::optional<double>& v, const char* name, double lo) {
    if (v && !(std::isfinite(*v) && *v >= lo && *v <= 1.0))
      throw ValidationError("row '" + r.item_id + "': " + name + " out of range");
  };
  in_unit(r.clip_score, "clip_score", -1.0);
  in_unit(r.clip_attr, "clip_attr", -1.0);
  in_unit(r.caption_alignment, "caption_alignment", -1.0);
  in_unit(r.collapse_fraction, "collapse_fraction", 0.0);
  in_unit(r.constraint_rate, "constraint_rate", 0.0);
  if (r.judge_score && (*r.judge_score < 1 || *r.judge_score > 5))
    throw ValidationError("row '" + r.item_id + "': judge score outside 1..5");
}

GroupSummary summarize(const std::string& name, const std::vector<const MetricRow*>& rows) {
  GroupSummary g;
  g.group = name;
  g.n = rows.size();
  RunningStat clip, attr, cap, score, coll, frac, rate;
  for (const MetricRow* r : rows) {
    if (r->clip_score) clip.add(*r->clip_score);
    if (r->clip_attr) attr.add(*r->clip_attr);
    if (r->caption_alignment) cap.add(*r->caption_alignment);
    if (r->judge_score) score.add(static_cast<double>(*r->judge_score));  // 3s included
    if (r->collapsed) coll.add(*r->collapsed ? 1.0 : 0.0);
    if (r->collapse_fraction) frac.add(*r->collapse_fraction);
    if (r->constraint_rate) rate.add(*r->constraint_rate);
  }
  auto opt = [](const RunningStat& s) { return s.count() ? std::optional<Stat>(s.stat()) : std::nullopt; };
  g.clip_score = opt(clip);
  g.clip_attr = opt(attr);
  g.caption_alignment = opt(cap);
  g.ccs = opt(score);
  g.cvr = opt(coll);
  g.collapse_fraction = opt(frac);
  g.constraint_rate = opt(rate);
  return g;
}

}  // namespace

ScoreReport aggregate_report(std::span<const MetricRow> rows, Grouping grouping,
                             const std::string& method,
                             const std::vector<std::string>& expected_groups) {
  ScoreReport rep;
  rep.method = method;
  rep.rows.assign(rows.begin(), rows.end());
  for (const auto& r : rows) validate_row(r);

  if (grouping == Grouping::ByCategory) {
    std::map<std::string, std::vector<const MetricRow*>> by;
    for (const auto& r : rows) by[r.group].push_back(&r);
    std::vector<std::string> order;
    for (const auto& g : expected_groups) {
      if (by.count(g))
        order.push_back(g);
      else
        rep.notes.push_back("group '" + g + "' has no rows; omitted");
    }
    for (const auto& [g, _] : by)
      if (std::find(order.begin(), order.end(), g) == order.end()) order.push_back(g);
    for (const auto& g : order) rep.groups.push_back(summarize(g, by[g]));
  }
  if (rows.empty()) {
    rep.notes.push_back("no rows; overall omitted");
  } else {
    std::vector<const MetricRow*> all;
    for (const auto& r : rows) all.push_back(&r);
    rep.groups.push_back(summarize("overall", all));
  }
  return rep;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

struct MetricColumn {
  const char* name;
  std::optional<Stat> GroupSummary::*member;
};

const MetricColumn kColumns[] = {
    {"clip_score", &GroupSummary::clip_score},
    {"clip_attr", &GroupSummary::clip_attr},
    {"caption_alignment", &GroupSummary::caption_alignment},
    {"ccs", &GroupSummary::ccs},
    {"cvr", &GroupSummary::cvr},
    {"collapse_fraction", &GroupSummary::collapse_fraction},
    {"constraint_rate", &GroupSummary::constraint_rate},
};

}  // namespace

void write_report_csv(std::ostream& out, const std::vector<ScoreReport>& reports) {
  out << "method,group,n";
  for (const auto& c : kColumns) out << "," << c.name << "," << c.name << "_sd";
  out << "\n";
  for (const auto& rep : reports)
    for (const auto& g : rep.groups) {
      out << csv_field(rep.method) << "," << csv_field(g.group) << "," << g.n;
      for (const auto& c : kColumns) {
        const auto& s = g.*(c.member);
        if (s)
          out << "," << num(s->mean) << "," << num(s->sd);
        else
          out << ",,";
      }
      out << "\n";
    }
}

nlohmann::ordered_json report_to_json(const std::vector<ScoreReport>& reports,
                                      const std::string& manifest_ref) {
  nlohmann::ordered_json j;
  j["schema"] = kReportSchema;
  if (!manifest_ref.empty()) j["manifest"] = manifest_ref;
  j["reports"] = nlohmann::ordered_json::array();
  for (const auto& rep : reports) {
    nlohmann::ordered_json r;
    r["method"] = rep.method;
    r["groups"] = nlohmann::ordered_json::array();
    for (const auto& g : rep.groups) {
      nlohmann::ordered_json gj;
      gj["group"] = g.group;
      gj["n"] = g.n;
      for (const auto& c : kColumns) {
        const auto& s = g.*(c.member);
        if (s) gj[c.name] = {{"mean", s->mean}, {"sd", s->sd}, {"n", s->n}};
      }
      r["groups"].push_back(gj);
    }
    r["notes"] = rep.notes;
    r["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : rep.rows) {
      nlohmann::ordered_json rj;
      rj["item_id"] = row.item_id;
      rj["group"] = row.group;
      if (row.clip_score) rj["clip_score"] = *row.clip_score;
      if (row.clip_attr) rj["clip_attr"] = *row.clip_attr;
      if (row.caption_alignment) rj["caption_alignment"] = *row.caption_alignment;
      if (row.judge_score) rj["judge_score"] = *row.judge_score;
      if (row.collapsed) rj["collapsed"] = *row.collapsed;
      if (row.collapse_fraction) rj["collapse_fraction"] = *row.collapse_fraction;
      if (row.constraint_rate) rj["constraint_rate"] = *row.constraint_rate;
      r["rows"].push_back(rj);
    }
    j["reports"].push_back(r);
  }
  return j;
}

}  // namespace dcr
