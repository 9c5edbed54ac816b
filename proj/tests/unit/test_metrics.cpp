#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "dcr/metrics.hpp"
#include "support.hpp"

using namespace dcr;
using nlohmann::json;

namespace {

// Looks embeddings up by frame id or text.
class MapEmbedding : public EmbeddingProvider {
 public:
  std::map<std::string, std::vector<double>> vectors;
  std::vector<double> embed_frame(const Frame& f) override { return vectors.at(f.id); }
  std::vector<double> embed_text(const std::string& t) override { return vectors.at(t); }
};

class EchoCaption : public CaptionProvider {
 public:
  explicit EchoCaption(std::string text) : text_(std::move(text)) {}
  std::string caption(const Frame&) override { return text_; }

 private:
  std::string text_;
};

class ThrowingEmbedding : public EmbeddingProvider {
 public:
  std::vector<double> embed_frame(const Frame&) override { throw std::runtime_error("down"); }
  std::vector<double> embed_text(const std::string&) override { return {1.0, 0.0}; }
};

std::vector<double> at_cos(double c) { return {c, std::sqrt(1 - c * c)}; }

Frame frame(const std::string& id) {
  Frame f;
  f.id = id;
  f.bytes = testing::png_header(4, 2);
  f.width = f.source_width = 4;
  f.height = f.source_height = 2;
  return f;
}

MetricRow row(const std::string& id, const std::string& group, double clip, int score,
              bool collapsed) {
  MetricRow r;
  r.item_id = id;
  r.group = group;
  r.clip_score = clip;
  r.judge_score = score;
  r.collapsed = collapsed;
  return r;
}

const GroupSummary& group(const ScoreReport& rep, const std::string& name) {
  for (const auto& g : rep.groups)
    if (g.group == name) return g;
  throw std::runtime_error("no group " + name);
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("clip alignment examples") {
    MapEmbedding p;
    p.vectors = {{"t", {1.0, 0.0}}, {"same", {1.0, 0.0}}, {"orth", {0.0, 3.0}},
                 {"a", at_cos(0.2)}, {"b", at_cos(0.4)}};
    std::vector<Frame> same = {frame("same")};
    CHECK(clip_alignment(same, "t", p) == doctest::Approx(1.0));
    std::vector<Frame> orth = {frame("orth")};
    CHECK(clip_alignment(orth, "t", p) == doctest::Approx(0.0));
    std::vector<Frame> two = {frame("a"), frame("b")};
    CHECK(clip_alignment(two, "t", p) == doctest::Approx(0.3));
    CHECK_THROWS_AS(clip_alignment(std::span<const Frame>{}, "t", p), ValidationError);

    ThrowingEmbedding bad;
    CHECK_THROWS_AS(clip_alignment(two, "t", bad), MetricError);
    p.vectors["zero"] = {0.0, 0.0};
    std::vector<Frame> zero = {frame("zero")};
    CHECK_THROWS_AS(clip_alignment(zero, "t", p), MetricError);
  }

  TEST_CASE("caption alignment examples") {
    StubEmbeddingProvider stub;
    EchoCaption echo("a snowy beach with waves");
    std::vector<Frame> frames = {frame("f0"), frame("f1")};
    auto r = caption_alignment(frames, "a snowy beach with waves", echo, stub);
    CHECK(r.value == doctest::Approx(1.0));
    CHECK(r.used == 2);

    MapEmbedding p;
    p.vectors = {{"prompt", {1.0, 0.0}}, {"c0", at_cos(0.5)}, {"c1", at_cos(0.7)}, {"c2", at_cos(0.9)}};
    StubCaptionProvider caps({{"f0", "c0"}, {"f1", "c1"}, {"f2", "c2"}});
    std::vector<Frame> three = {frame("f0"), frame("f1"), frame("f2")};
    CHECK(caption_alignment(three, "prompt", caps, p).value == doctest::Approx(0.7));

    std::vector<Frame> partial = {frame("f0"), frame("missing"), frame("f2")};
    auto pr = caption_alignment(partial, "prompt", caps, p);
    CHECK(pr.value == doctest::Approx(0.7));
    CHECK(pr.used == 2);
    CHECK(pr.skipped == 1);
    REQUIRE(pr.errors.size() == 1);
    CHECK(pr.errors[0].find("missing") != std::string::npos);

    std::vector<Frame> none = {frame("x"), frame("y")};
    CHECK_THROWS_AS(caption_alignment(none, "prompt", caps, p), MetricError);
    CHECK_THROWS_AS(caption_alignment(std::span<const Frame>{}, "prompt", caps, p), ValidationError);
  }

  TEST_CASE("stub embeddings are deterministic unit vectors") {
    StubEmbeddingProvider a(32), b(32);
    auto u = a.embed_text("hello");
    CHECK(u == b.embed_text("hello"));
    CHECK(testing::ref_norm(u) == doctest::Approx(1.0));
    CHECK(a.embed_frame(frame("hello")) == u);
    CHECK(u != a.embed_text("world"));
    CHECK_THROWS_AS(StubEmbeddingProvider(0), ValidationError);
  }

  TEST_CASE("judge score and violation means") {
    std::vector<int> s1 = {5, 5, 4, 2}, s2 = {3}, bad = {0, 4}, hi = {6};
    CHECK(ccs(s1) == 4.0);
    CHECK(ccs(s2) == 3.0);
    CHECK_THROWS_AS(ccs(bad), ValidationError);
    CHECK_THROWS_AS(ccs(hi), ValidationError);
    CHECK_THROWS_AS(ccs(std::span<const int>{}), ValidationError);
    CHECK(cvr({true, false, false, true}) == 0.5);
    CHECK(cvr({false, false}) == 0.0);
    CHECK(cvr({true, true, true}) == 1.0);
    CHECK_THROWS_AS(cvr({}), ValidationError);
  }

  TEST_CASE("toy collapse fraction") {
    auto s = default_bias_scenario();
    const auto& rare = s.base.components[s.rare_index].mean;
    const auto& dom = s.base.components[s.dominant_index].mean;
    std::vector<std::vector<double>> r(5, rare), d(5, dom), mix = {rare, dom, dom, rare};
    CHECK(toy_collapse_fraction(r, s) == 0.0);
    CHECK(toy_collapse_fraction(d, s) == 1.0);
    CHECK(toy_collapse_fraction(mix, s) == 0.5);
  }

  TEST_CASE("Wilson interval") {
    auto ci = wilson_interval(8, 10, 1.96);
    CHECK(ci.lo == doctest::Approx(0.4902).epsilon(1e-4));
    CHECK(ci.hi == doctest::Approx(0.9433).epsilon(1e-4));
    for (auto [k, n] : {std::pair<int, int>{0, 20}, {20, 20}, {7, 31}, {1558, 2000}}) {
      double z = 1.959963984540054, p = double(k) / n;
      double den = 1 + z * z / n;
      double c = (p + z * z / (2.0 * n)) / den;
      double h = z / den * std::sqrt(p * (1 - p) / n + z * z / (4.0 * n * n));
      auto w = wilson_interval(k, n);
      CHECK(w.lo == doctest::Approx(c - h).epsilon(1e-12));
      CHECK(w.hi == doctest::Approx(c + h).epsilon(1e-12));
      CHECK(w.lo <= p);
      CHECK(w.hi >= p);
    }
    CHECK(wilson_interval(0, 20).lo == doctest::Approx(0.0));
    CHECK_THROWS_AS(wilson_interval(0, 0), ValidationError);
    CHECK_THROWS_AS(wilson_interval(3, 2), ValidationError);
  }

  TEST_CASE("one-pass and two-pass statistics agree") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> normal(1e6, 2.0);
    std::vector<double> v(100000);
    RunningStat rs;
    for (double& x : v) {
      x = normal(rng);
      rs.add(x);
    }
    auto a = rs.stat(), b = mean_sd(v);
    CHECK(a.n == b.n);
    CHECK(a.mean == doctest::Approx(b.mean).epsilon(1e-12));
    CHECK(a.sd == doctest::Approx(b.sd).epsilon(1e-9));
    std::vector<double> one = {4.5};
    CHECK(mean_sd(one).sd == 0.0);
    CHECK_THROWS_AS(mean_sd(std::span<const double>{}), ValidationError);
  }

  TEST_CASE("single row aggregates equal the row") {
    std::vector<MetricRow> rows = {row("a", "ENV", 0.31, 4, false)};
    auto rep = aggregate_report(rows, Grouping::Overall);
    REQUIRE(rep.groups.size() == 1);
    const auto& g = rep.groups[0];
    CHECK(g.group == "overall");
    CHECK(g.clip_score->mean == 0.31);
    CHECK(g.clip_score->sd == 0.0);
    CHECK(g.ccs->mean == 4.0);
    CHECK(g.cvr->mean == 0.0);
    CHECK_FALSE(g.caption_alignment.has_value());
  }

  TEST_CASE("two groups against hand-computed means and deviations") {
    std::vector<MetricRow> rows = {row("a", "ENV", 0.2, 5, false), row("b", "ENV", 0.4, 3, true),
                                   row("c", "TEMP", 0.1, 1, true), row("d", "TEMP", 0.3, 2, true),
                                   row("e", "TEMP", 0.5, 3, false)};
    auto rep = aggregate_report(rows, Grouping::ByCategory, "m", {"ENV", "TEMP", "OBJ"});
    REQUIRE(rep.groups.size() == 3);
    CHECK(rep.groups[0].group == "ENV");
    CHECK(rep.groups[2].group == "overall");
    REQUIRE(rep.notes.size() == 1);
    CHECK(rep.notes[0].find("OBJ") != std::string::npos);

    const auto& env = group(rep, "ENV");
    CHECK(env.clip_score->mean == doctest::Approx(0.3));
    CHECK(env.clip_score->sd == doctest::Approx(std::sqrt(0.02)));
    CHECK(env.ccs->mean == doctest::Approx(4.0));
    CHECK(env.cvr->mean == doctest::Approx(0.5));
    const auto& temp = group(rep, "TEMP");
    CHECK(temp.clip_score->sd == doctest::Approx(0.2));
    CHECK(temp.ccs->mean == doctest::Approx(2.0));
    CHECK(temp.ccs->sd == doctest::Approx(1.0));
    const auto& all = group(rep, "overall");
    CHECK(all.n == 5);
    // Ambiguous 3s stay in the mean: (5+3+1+2+3)/5.
    CHECK(all.ccs->mean == doctest::Approx(2.8));
    CHECK(all.ccs->n == 5);
    CHECK(all.cvr->mean == doctest::Approx(0.6));
  }

  TEST_CASE("eight-category fixture gives one row per category plus overall") {
    std::vector<MetricRow> rows;
    std::vector<std::string> cats = {"ENV", "TEMP", "OBJ", "ATTR", "SCALE", "CTX", "MAT", "DENS"};
    for (std::size_t k = 0; k < 16; ++k)
      rows.push_back(row("i" + std::to_string(k), cats[k % 8], 0.1 * (k % 5), 1 + int(k % 5), k % 3 == 0));
    auto rep = aggregate_report(rows, Grouping::ByCategory, "m", cats);
    REQUIRE(rep.groups.size() == 9);
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(rep.groups[k].group == cats[k]);
      CHECK(rep.groups[k].n == 2);
    }
    CHECK(rep.notes.empty());
  }

  TEST_CASE("aggregation is invariant to row order and equivariant to rescaling") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 0.5);
    std::vector<MetricRow> rows;
    for (int k = 0; k < 40; ++k) rows.push_back(row(std::to_string(k), k % 2 ? "A" : "B", u(rng), 1 + k % 5, k % 4 == 0));
    auto base = aggregate_report(rows, Grouping::ByCategory);
    auto shuffled = rows;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto perm = aggregate_report(shuffled, Grouping::ByCategory);
    for (const char* g : {"A", "B", "overall"}) {
      CHECK(group(perm, g).clip_score->mean == doctest::Approx(group(base, g).clip_score->mean).epsilon(1e-14));
      CHECK(group(perm, g).clip_score->sd == doctest::Approx(group(base, g).clip_score->sd).epsilon(1e-12));
      CHECK(group(perm, g).ccs->mean == doctest::Approx(group(base, g).ccs->mean).epsilon(1e-14));
    }
    auto scaled = rows;
    for (auto& r : scaled) *r.clip_score *= 2.0;
    auto sc = aggregate_report(scaled, Grouping::Overall);
    CHECK(sc.groups[0].clip_score->mean == doctest::Approx(2 * group(base, "overall").clip_score->mean));
    CHECK(sc.groups[0].clip_score->sd == doctest::Approx(2 * group(base, "overall").clip_score->sd));
  }

  TEST_CASE("rows outside their ranges are rejected") {
    std::vector<MetricRow> rows = {row("a", "ENV", 1.5, 3, false)};
    CHECK_THROWS_AS(aggregate_report(rows, Grouping::Overall), ValidationError);
    rows = {row("a", "ENV", 0.2, 7, false)};
    CHECK_THROWS_AS(aggregate_report(rows, Grouping::Overall), ValidationError);
    auto empty = aggregate_report(std::span<const MetricRow>{}, Grouping::Overall);
    CHECK(empty.groups.empty());
    CHECK_FALSE(empty.notes.empty());
  }

  TEST_CASE("report serialization") {
    std::vector<MetricRow> rows = {row("a", "ENV", 0.25, 4, false)};
    auto rep = aggregate_report(rows, Grouping::ByCategory, "full-dcr");
    std::ostringstream os;
    write_report_csv(os, {rep});
    std::string header = os.str().substr(0, os.str().find('\n'));
    CHECK(header ==
          "method,group,n,clip_score,clip_score_sd,clip_attr,clip_attr_sd,caption_alignment,"
          "caption_alignment_sd,ccs,ccs_sd,cvr,cvr_sd,collapse_fraction,collapse_fraction_sd,"
          "constraint_rate,constraint_rate_sd");
    CHECK(os.str().find("full-dcr,ENV,1,0.25,0,,,,,4,0,0,0,,,,") != std::string::npos);
    auto j = report_to_json({rep}, "manifest.json");
    CHECK(j["schema"] == kReportSchema);
    CHECK(j["manifest"] == "manifest.json");
    CHECK(j["reports"][0]["groups"][0]["clip_score"]["mean"] == 0.25);
    CHECK_FALSE(j["reports"][0]["groups"][0].contains("clip_attr"));
  }

  TEST_CASE("image headers and frame loading") {
    auto png = testing::png_header(640, 360);
    auto dims = image_dimensions(png);
    REQUIRE(dims);
    CHECK(*dims == std::pair<int, int>{640, 360});

    std::vector<std::uint8_t> jpg = {0xFF, 0xD8, 0xFF, 0xE0, 0x00, 0x04, 0x00, 0x00,
                                     0xFF, 0xC0, 0x00, 0x11, 0x08, 0x00, 0xF0, 0x01, 0x40,
                                     0x03, 0x01, 0x22, 0x00, 0x02, 0x11, 0x01};
    dims = image_dimensions(jpg);
    REQUIRE(dims);
    CHECK(*dims == std::pair<int, int>{320, 240});
    std::vector<std::uint8_t> junk = {1, 2, 3, 4, 5};
    CHECK_FALSE(image_dimensions(junk));

    testing::TempDir dir;
    {
      std::ofstream(dir.str("a.png"), std::ios::binary).write(reinterpret_cast<const char*>(png.data()), png.size());
      std::ofstream(dir.str("b.txt")) << "not an image";
    }
    auto f = load_frame(dir.str("a.png"));
    CHECK(f.id == "a.png");
    CHECK(f.mime == "image/png");
    CHECK(f.width == 640);
    CHECK(f.source_height == 360);
    CHECK_THROWS_AS(load_frame(dir.str("b.txt")), MetricError);
    CHECK_THROWS_AS(load_frame(dir.str("none.png")), MetricError);
  }

  TEST_CASE("frame sampling and resizing") {
    CHECK(uniform_frame_indices(10, 4) == std::vector<std::size_t>{0, 3, 6, 9});
    CHECK(uniform_frame_indices(5, 8) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(uniform_frame_indices(7, 1) == std::vector<std::size_t>{0});
    CHECK_THROWS_AS(uniform_frame_indices(0, 3), ValidationError);
    CHECK(fit_preserving_aspect(1920, 1080, 512) == std::pair<int, int>{512, 288});
    CHECK(fit_preserving_aspect(480, 848, 424) == std::pair<int, int>{240, 424});
    CHECK(fit_preserving_aspect(100, 50, 512) == std::pair<int, int>{100, 50});
    CHECK_THROWS_AS(fit_preserving_aspect(0, 10, 512), ValidationError);
  }

  TEST_CASE("base64 test vectors") {
    auto enc = [](std::string s) {
      std::vector<std::uint8_t> b(s.begin(), s.end());
      return base64_encode(b);
    };
    CHECK(enc("") == "");
    CHECK(enc("f") == "Zg==");
    CHECK(enc("fo") == "Zm8=");
    CHECK(enc("foo") == "Zm9v");
    CHECK(enc("foob") == "Zm9vYg==");
    CHECK(enc("fooba") == "Zm9vYmE=");
    CHECK(enc("foobar") == "Zm9vYmFy");
  }

  TEST_CASE("HTTP providers") {
    using testing::ScriptedTransport;
    auto t = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Handler>{
        [](const json& b) -> json {
          if (b["input"].contains("text")) return {{"embedding", {1.0, 0.0}}};
          return {{"embedding", {0.6, 0.8}}};
        }});
    HttpEmbeddingProvider emb(t, "clip", testing::no_sleep_retry());
    std::vector<Frame> frames = {frame("f")};
    CHECK(clip_alignment(frames, "text", emb) == doctest::Approx(0.6));
    const auto& img = t->bodies().back()["input"]["image"];
    CHECK(img["mime"] == "image/png");
    CHECK(img["data"] == base64_encode(frames[0].bytes));
    CHECK(t->bodies().front()["model"] == "clip");

    auto broken = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Handler>{
        [](const json&) -> json { return {{"vector", {1.0}}}; }});
    HttpEmbeddingProvider bad(broken, "clip", testing::no_sleep_retry());
    CHECK_THROWS_AS(clip_alignment(frames, "text", bad), MetricError);

    auto refused = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Handler>{
        [](const json&) -> json { throw TransportError("400", false); }});
    HttpEmbeddingProvider no(refused, "clip", testing::no_sleep_retry());
    CHECK_THROWS_AS(clip_alignment(frames, "text", no), MetricError);
    CHECK(refused->calls() == 1);

    auto ct = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Handler>{
        [](const json&) -> json { return {{"caption", "a beach"}}; }});
    HttpCaptionProvider cap(ct, "cap", testing::no_sleep_retry());
    CHECK(cap.caption(frames[0]) == "a beach");
    auto ct2 = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Handler>{
        [](const json&) -> json { return {{"text", "a beach"}}; }});
    HttpCaptionProvider cap2(ct2, "cap", testing::no_sleep_retry());
    CHECK_THROWS_AS(cap2.caption(frames[0]), FormatError);
    CHECK_THROWS_AS(HttpCaptionProvider(nullptr, "cap"), ConfigError);
  }
}
