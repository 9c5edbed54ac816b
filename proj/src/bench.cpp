#include "dcr/bench.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dcr {

namespace {

constexpr const char* kAttractorInstruction =
    "Given the following text prompt describing a rare but plausible visual composition, "
    "generate a single alternative prompt that represents the most common or frequently "
    "occurring version of the same scene. Remove or replace only the rare compositional factor "
    "(e.g., unusual attribute, atypical environment, or unlikely object placement) while "
    "preserving all other scene elements. Output only the rewritten prompt, with no "
    "explanation.";

const char* kItemFields[] = {"id", "category", "prompt", "attractor_prompt", "factors"};

// Line on which each element of the top-level array starts.
std::vector<std::size_t> element_start_lines(std::string_view text) {
  std::vector<std::size_t> lines;
  std::size_t line = 1;
  int depth = 0;
  bool in_str = false, esc = false, expecting = false;
  for (char c : text) {
    if (c == '\n') ++line;
    if (in_str) {
      if (esc)
        esc = false;
      else if (c == '\\')
        esc = true;
      else if (c == '"')
        in_str = false;
      continue;
    }
    if (expecting && depth == 1 && !std::isspace(static_cast<unsigned char>(c)) && c != ',' &&
        c != ']') {
      lines.push_back(line);
      expecting = false;
    }
    switch (c) {
      case '"': in_str = true; break;
      case '[':
      case '{':
        if (++depth == 1) expecting = true;
        break;
      case ']':
      case '}': --depth; break;
      case ',':
        if (depth == 1) expecting = true;
        break;
      default: break;
    }
  }
  return lines;
}

std::size_t line_of_offset(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + offset, '\n'));
}

struct ItemContext {
  std::string source;
  std::size_t line;

  [[noreturn]] void fail(const std::string& field, const std::string& msg) const {
    throw ValidationError(source + ":" + std::to_string(line) + ": field '" + field + "': " + msg);
  }
};

std::string require_string(const nlohmann::json& obj, const char* key, const ItemContext& ctx) {
  if (!obj.contains(key)) ctx.fail(key, "missing");
  const auto& v = obj.at(key);
  if (!v.is_string()) ctx.fail(key, "expected a string");
  std::string s = v.get<std::string>();
  if (s.empty()) ctx.fail(key, "must not be empty");
  return s;
}

std::vector<std::string> string_list(const nlohmann::json& v, const std::string& field,
                                     const ItemContext& ctx) {
  if (!v.is_array()) ctx.fail(field, "expected an array of strings");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) ctx.fail(field, "expected an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

FactorConstraint parse_factor(const nlohmann::json& f, std::size_t idx, Category cat,
                              const ItemContext& ctx) {
  std::string where = "factors[" + std::to_string(idx) + "]";
  if (!f.is_object()) ctx.fail(where, "expected an object");
  for (auto it = f.begin(); it != f.end(); ++it) {
    static const std::set<std::string> known{"name", "allowed", "threshold", "prior", "prior_min"};
    if (!known.count(it.key())) ctx.fail(where + "." + it.key(), "unknown field");
  }
  FactorConstraint fc;
  if (!f.contains("name") || !f["name"].is_string() || f["name"].get<std::string>().empty())
    ctx.fail(where + ".name", "expected a non-empty string");
  fc.name = f["name"].get<std::string>();
  bool has_set = f.contains("allowed"), has_thr = f.contains("threshold");
  if (has_set == has_thr) ctx.fail(where, "needs exactly one of 'allowed' or 'threshold'");
  if (has_set) {
    fc.allowed = string_list(f["allowed"], where + ".allowed", ctx);
    if (fc.allowed.empty()) ctx.fail(where + ".allowed", "must not be empty");
    if (f.contains("prior_min")) ctx.fail(where + ".prior_min", "only valid with 'threshold'");
  } else {
    if (cat != Category::DENS) ctx.fail(where + ".threshold", "threshold form is only valid for DENS");
    if (!f["threshold"].is_number() || !std::isfinite(f["threshold"].get<double>()))
      ctx.fail(where + ".threshold", "expected a finite number");
    fc.threshold = f["threshold"].get<double>();
    if (f.contains("prior_min")) {
      if (!f["prior_min"].is_number()) ctx.fail(where + ".prior_min", "expected a number");
      fc.prior_min = f["prior_min"].get<double>();
    }
    if (f.contains("prior")) ctx.fail(where + ".prior", "use 'prior_min' with the threshold form");
  }
  if (f.contains("prior")) fc.prior = string_list(f["prior"], where + ".prior", ctx);
  return fc;
}

}  // namespace

std::string to_string(Category c) {
  switch (c) {
    case Category::ENV: return "ENV";
    case Category::TEMP: return "TEMP";
    case Category::OBJ: return "OBJ";
    case Category::ATTR: return "ATTR";
    case Category::SCALE: return "SCALE";
    case Category::CTX: return "CTX";
    case Category::MAT: return "MAT";
    case Category::DENS: return "DENS";
  }
  return "?";
}

Category parse_category(std::string_view s) {
  for (Category c : kAllCategories)
    if (to_string(c) == s) return c;
  throw ValidationError("unknown category '" + std::string(s) +
                        "' (expected ENV, TEMP, OBJ, ATTR, SCALE, CTX, MAT or DENS)");
}

std::map<Category, std::size_t> BenchSuite::counts() const {
  std::map<Category, std::size_t> out;
  for (Category c : kAllCategories) out[c] = 0;
  for (const auto& it : items) ++out[it.category];
  return out;
}

BenchSuite parse_suite(std::string_view text, bool canonical, const std::string& source) {
  if (std::all_of(text.begin(), text.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); }))
    throw ValidationError(source + ": suite is empty");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(source + ":" + std::to_string(line_of_offset(text, e.byte)) +
                      ": malformed JSON: " + e.what());
  }
  if (!doc.is_array()) throw ValidationError(source + ":1: suite must be a JSON array of items");
  if (doc.empty()) throw ValidationError(source + ": suite has no items");
  auto lines = element_start_lines(text);

  BenchSuite suite;
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    ItemContext ctx{source, i < lines.size() ? lines[i] : 1};
    const auto& obj = doc[i];
    if (!obj.is_object()) ctx.fail("item", "expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it)
      if (std::find(std::begin(kItemFields), std::end(kItemFields), it.key()) == std::end(kItemFields))
        ctx.fail(it.key(), "unknown field");
    BenchPrompt item;
    item.id = require_string(obj, "id", ctx);
    std::string cat = require_string(obj, "category", ctx);
    try {
      item.category = parse_category(cat);
    } catch (const ValidationError& e) {
      ctx.fail("category", e.what());
    }
    item.prompt = require_string(obj, "prompt", ctx);
    item.attractor_prompt = require_string(obj, "attractor_prompt", ctx);
    if (item.prompt == item.attractor_prompt)
      ctx.fail("attractor_prompt", "must differ from the prompt");
    if (!obj.contains("factors") || !obj["factors"].is_array())
      ctx.fail("factors", "expected an array");
    if (obj["factors"].empty()) ctx.fail("factors", "at least one factor is required");
    for (std::size_t k = 0; k < obj["factors"].size(); ++k)
      item.factors.push_back(parse_factor(obj["factors"][k], k, item.category, ctx));
    auto [pos, fresh] = seen.emplace(item.id, ctx.line);
    if (!fresh)
      ctx.fail("id", "duplicate id '" + item.id + "' (first seen on line " +
                         std::to_string(pos->second) + ")");
    suite.items.push_back(std::move(item));
  }

  if (canonical) {
    auto counts = suite.counts();
    std::string bad;
    for (auto [c, n] : counts)
      if (n != kCanonicalPerCategory) bad += " " + to_string(c) + "=" + std::to_string(n);
    if (!bad.empty() || suite.items.size() != kCanonicalPerCategory * kAllCategories.size())
      throw ValidationError(source + ": canonical suite needs 50 items in each of 8 categories (400), got " +
                            std::to_string(suite.items.size()) + ";" + bad);
  }
  return suite;
}

BenchSuite load_suite(const std::string& path, bool canonical) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open suite file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_suite(ss.str(), canonical, path);
}

nlohmann::ordered_json suite_to_json(const BenchSuite& suite) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& it : suite.items) {
    nlohmann::ordered_json j;
    j["id"] = it.id;
    j["category"] = to_string(it.category);
    j["prompt"] = it.prompt;
    j["attractor_prompt"] = it.attractor_prompt;
    j["factors"] = nlohmann::ordered_json::array();
    for (const auto& f : it.factors) {
      nlohmann::ordered_json fj;
      fj["name"] = f.name;
      if (f.threshold)
        fj["threshold"] = *f.threshold;
      else
        fj["allowed"] = f.allowed;
      if (!f.prior.empty()) fj["prior"] = f.prior;
      if (f.prior_min) fj["prior_min"] = *f.prior_min;
      j["factors"].push_back(fj);
    }
    arr.push_back(j);
  }
  return arr;
}

ConstraintResult eval_constraint(std::span<const double> x0, const BenchPrompt& item,
                                 const ExtractorMap& extractors) {
  std::vector<std::string> missing;
  for (const auto& f : item.factors)
    if (!extractors.count(f.name)) missing.push_back(f.name);
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    throw ConfigError("item '" + item.id + "': no extractor for factor(s): " + names);
  }

  ConstraintResult res;
  res.satisfied = true;
  for (const auto& f : item.factors) {
    FactorOutcome out;
    out.value = extractors.at(f.name)(x0);
    if (f.is_threshold()) {
      const double* g = std::get_if<double>(&out.value);
      if (!g) throw ConfigError("factor '" + f.name + "' needs a numeric extractor");
      out.satisfied = *g <= *f.threshold;
      out.collapsed = f.prior_min && *g >= *f.prior_min;
    } else {
      const std::string* g = std::get_if<std::string>(&out.value);
      if (!g) throw ConfigError("factor '" + f.name + "' needs a categorical extractor");
      out.satisfied = std::find(f.allowed.begin(), f.allowed.end(), *g) != f.allowed.end();
      out.collapsed = std::find(f.prior.begin(), f.prior.end(), *g) != f.prior.end();
    }
    // A factor shared by prompt and attractor is not a collapse.
    out.collapsed = out.collapsed && !out.satisfied;
    res.satisfied = res.satisfied && out.satisfied;
    res.collapsed = res.collapsed || out.collapsed;
    res.per_factor[f.name] = std::move(out);
  }
  return res;
}

std::vector<std::string> missing_extractors(const BenchSuite& suite,
                                            const std::set<std::string>& available) {
  std::set<std::string> missing;
  for (const auto& it : suite.items)
    for (const auto& f : it.factors)
      if (!available.count(f.name)) missing.insert(f.name);
  return {missing.begin(), missing.end()};
}

std::string to_string(ToyExtractorKind k) {
  return k == ToyExtractorKind::Mode ? "mode" : "dominant_share";
}

ToyExtractorKind parse_toy_extractor(std::string_view s) {
  if (s == "mode") return ToyExtractorKind::Mode;
  if (s == "dominant_share") return ToyExtractorKind::DominantShare;
  throw ConfigError("unknown toy extractor '" + std::string(s) + "' (expected mode or dominant_share)");
}

FactorExtractor make_toy_extractor(ToyExtractorKind kind, const FactorConstraint& factor,
                                   const BiasScenario& scenario) {
  if (kind == ToyExtractorKind::Mode) {
    std::string rare = factor.allowed.empty() ? "rare" : factor.allowed.front();
    std::string dominant =
        factor.prior.empty() ? scenario.base.components[scenario.dominant_index].name
                             : factor.prior.front();
    return [rare, dominant, scenario](std::span<const double> x0) -> FactorValue {
      std::size_t k = mode_assignment(x0, scenario);
      if (k == scenario.rare_index) return rare;
      if (k == scenario.dominant_index) return dominant;
      return scenario.base.components[k].name;
    };
  }
  return [scenario](std::span<const double> x0) -> FactorValue {
    const auto& md = scenario.base.components[scenario.dominant_index].mean;
    const auto& mr = scenario.base.components[scenario.rare_index].mean;
    double s2 = scenario.base.sigma0 * scenario.base.sigma0;
    double dd = 0.0, dr = 0.0;
    for (std::size_t j = 0; j < x0.size(); ++j) {
      dd += (x0[j] - md[j]) * (x0[j] - md[j]);
      dr += (x0[j] - mr[j]) * (x0[j] - mr[j]);
    }
    double z = (dr - dd) / (2.0 * s2);  // log-likelihood ratio dominant : rare
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  };
}

ExtractorMap make_toy_extractors(const BenchPrompt& item, const BiasScenario& scenario,
                                 const std::map<std::string, ToyExtractorKind>* kinds) {
  ExtractorMap out;
  for (const auto& f : item.factors) {
    ToyExtractorKind kind;
    if (kinds) {
      auto it = kinds->find(f.name);
      if (it == kinds->end()) continue;
      kind = it->second;
    } else {
      kind = f.is_threshold() ? ToyExtractorKind::DominantShare : ToyExtractorKind::Mode;
    }
    out[f.name] = make_toy_extractor(kind, f, scenario);
  }
  return out;
}

std::string render_attractor_template(std::string_view p) {
  if (p.empty()) throw ValidationError("attractor template needs a non-empty prompt");
  std::string out = kAttractorInstruction;
  out += "\n\nInput prompt: ";
  out += p;
  return out;
}

ChatTextModelClient::ChatTextModelClient(std::shared_ptr<JsonTransport> transport,
                                         std::string model, RetryPolicy retry)
    : transport_(std::move(transport)), model_(std::move(model)), retry_(std::move(retry)) {
  if (!transport_) throw ConfigError("text-model client needs a transport");
}

std::string ChatTextModelClient::complete(const CompletionRequest& request) {
  nlohmann::ordered_json body;
  body["model"] = model_;
  body["messages"] = {{{"role", "user"}, {"content", request.instruction}}};
  body["temperature"] = request.temperature;
  body["n"] = request.max_completions;
  return chat_message_content(post_with_retries(*transport_, body, retry_));
}

std::string generate_attractor_prompt(std::string_view p, TextModelClient& client) {
  CompletionRequest req{render_attractor_template(p), 0.0, 1};
  std::string raw = client.complete(req);
  auto first = raw.find_first_not_of(" \t\r\n");
  if (first == std::string::npos)
    throw FormatError("attractor completion for '" + std::string(p) + "' is empty; needs manual review");
  auto last = raw.find_last_not_of(" \t\r\n");
  std::string text = raw.substr(first, last - first + 1);
  if (text.find_first_of("\r\n") != std::string::npos)
    throw FormatError("attractor completion for '" + std::string(p) +
                      "' spans several lines; needs manual review");
  return text;
}

}  // namespace dcr
