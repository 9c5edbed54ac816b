#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dcr/remote.hpp"
#include "dcr/toy_diffusion.hpp"

namespace dcr {

enum class Category { ENV, TEMP, OBJ, ATTR, SCALE, CTX, MAT, DENS };

inline constexpr std::array<Category, 8> kAllCategories = {
    Category::ENV,   Category::TEMP, Category::OBJ, Category::ATTR,
    Category::SCALE, Category::CTX,  Category::MAT, Category::DENS};

std::string to_string(Category c);
Category parse_category(std::string_view s);  // throws ValidationError

// Either a discrete allowed set S_k(p) or an upper threshold tau(p).
// `prior` / `prior_min` describe where the attractor puts the factor.
struct FactorConstraint {
  std::string name;
  std::vector<std::string> allowed;
  std::optional<double> threshold;
  std::vector<std::string> prior;
  std::optional<double> prior_min;

  bool is_threshold() const { return threshold.has_value(); }
};

struct BenchPrompt {
  std::string id;
  Category category = Category::ENV;
  std::string prompt;
  std::string attractor_prompt;
  std::vector<FactorConstraint> factors;
};

struct BenchSuite {
  std::vector<BenchPrompt> items;

  std::map<Category, std::size_t> counts() const;
};

inline constexpr std::size_t kCanonicalPerCategory = 50;

BenchSuite parse_suite(std::string_view text, bool canonical = false,
                       const std::string& source = "<suite>");
BenchSuite load_suite(const std::string& path, bool canonical = false);
nlohmann::ordered_json suite_to_json(const BenchSuite& suite);

using FactorValue = std::variant<std::string, double>;
using FactorExtractor = std::function<FactorValue(std::span<const double> x0)>;
using ExtractorMap = std::map<std::string, FactorExtractor>;

struct FactorOutcome {
  FactorValue value;
  bool satisfied = false;
  bool collapsed = false;
};

struct ConstraintResult {
  bool satisfied = false;
  bool collapsed = false;  // some factor violates its constraint inside the attractor's region
  std::map<std::string, FactorOutcome> per_factor;
};

ConstraintResult eval_constraint(std::span<const double> x0, const BenchPrompt& item,
                                 const ExtractorMap& extractors);

// Names of declared factors not covered by `available`, sorted and de-duplicated.
std::vector<std::string> missing_extractors(const BenchSuite& suite,
                                            const std::set<std::string>& available);

enum class ToyExtractorKind { Mode, DominantShare };
std::string to_string(ToyExtractorKind k);
ToyExtractorKind parse_toy_extractor(std::string_view s);  // "mode", "dominant_share"

// Toy mapping. Mode: rare mode -> allowed[0], dominant -> prior[0], anything else
// -> the component name. DominantShare: dominant vs rare likelihood share in [0, 1].
FactorExtractor make_toy_extractor(ToyExtractorKind kind, const FactorConstraint& factor,
                                   const BiasScenario& scenario);
// Extractors for one item's factors. Kinds follow the constraint form unless
// `kinds` is given, in which case only the factors it names get an extractor.
ExtractorMap make_toy_extractors(const BenchPrompt& item, const BiasScenario& scenario,
                                 const std::map<std::string, ToyExtractorKind>* kinds = nullptr);

std::string render_attractor_template(std::string_view p);

struct CompletionRequest {
  std::string instruction;
  double temperature = 0.0;
  int max_completions = 1;
};

class TextModelClient {
 public:
  virtual ~TextModelClient() = default;
  virtual std::string complete(const CompletionRequest& request) = 0;
};

// Chat-completions style client over a JsonTransport.
class ChatTextModelClient final : public TextModelClient {
 public:
  ChatTextModelClient(std::shared_ptr<JsonTransport> transport, std::string model,
                      RetryPolicy retry = {});
  std::string complete(const CompletionRequest& request) override;

 private:
  std::shared_ptr<JsonTransport> transport_;
  std::string model_;
  RetryPolicy retry_;
};

std::string generate_attractor_prompt(std::string_view p, TextModelClient& client);

}  // namespace dcr
