#include "dcr/judge_client.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <ctime>
#include <fstream>
#include <regex>
#include <thread>

namespace dcr {

const std::vector<std::string>& rubric_levels() {
  static const std::vector<std::string> levels = {
      "Neither compositional factor is present; the output reflects neither the intended "
      "composition nor a semantically coherent alternative.",
      "Only one compositional factor is present, or the output has collapsed entirely toward "
      "the attractor completion p_attr.",
      "Both factors are partially present but incoherently composed, or the output is ambiguous "
      "between the intended composition and the attractor.",
      "Both factors are present and mostly coherently composed, with minor ambiguity or "
      "imperfection.",
      "Both factors are fully and coherently present; the output clearly reflects the intended "
      "rare composition rather than the frequent alternative.",
  };
  return levels;
}

void JudgeRequest::validate() const {
  if (rubric_version != kRubricVersion)
    throw ValidationError("unknown rubric version '" + rubric_version + "'");
  if (prompt_p.empty()) throw ValidationError("judge request needs the prompt");
  if (attractor.empty()) throw ValidationError("judge request needs the attractor prompt");
  if (factors.empty()) throw ValidationError("judge request needs the compositional factors");
  if (frames.empty()) throw ValidationError("judge request needs at least one frame");
  for (const auto& f : frames)
    if (f.bytes.empty()) throw ValidationError("frame '" + f.id + "' has no image data");
}

nlohmann::json build_rubric_message(const JudgeRequest& req) {
  req.validate();
  std::string system =
      "You judge generated videos for compositional fidelity. Rubric " + req.rubric_version +
      ". Assign an integer score from 1 to 5:\n";
  const auto& levels = rubric_levels();
  for (std::size_t i = 0; i < levels.size(); ++i)
    system += std::to_string(i + 1) + ": " + levels[i] + "\n";
  system +=
      "Also decide whether the output collapsed toward the attractor prompt (collapsed: true) "
      "or not (collapsed: false). You may reason first. The last line of your answer must be "
      "exactly:\nscore: <1-5>, collapsed: <true|false>";

  std::string text = "Prompt p: " + req.prompt_p + "\nCompositional factors:";
  for (std::size_t i = 0; i < req.factors.size(); ++i)
    text += (i ? "; " : " ") + req.factors[i];
  text += "\nAttractor prompt p_attr: " + req.attractor;
  text += "\nFrames: " + std::to_string(req.frames.size()) +
          ", uniformly sampled across the video in temporal order, resized with aspect ratio "
          "preserved.";
  for (std::size_t i = 0; i < req.frames.size(); ++i) {
    const auto& f = req.frames[i];
    text += "\nframe " + std::to_string(i + 1) + ": " + std::to_string(f.width) + "x" +
            std::to_string(f.height);
    if (f.source_width > 0 && f.source_height > 0)
      text += " (from " + std::to_string(f.source_width) + "x" + std::to_string(f.source_height) + ")";
  }

  nlohmann::json content = nlohmann::json::array();
  content.push_back({{"type", "text"}, {"text", text}});
  for (const auto& f : req.frames)
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:" + f.mime + ";base64," + base64_encode(f.bytes)}}}});

  return nlohmann::json::array({{{"role", "system"}, {"content", system}},
                                {{"role", "user"}, {"content", content}}});
}

JudgeVerdict parse_verdict(const std::string& raw) {
  std::size_t end = raw.find_last_not_of(" \t\r\n");
  if (end == std::string::npos) throw VerdictError("empty judge response", raw);
  std::size_t start = raw.find_last_of('\n', end);
  start = start == std::string::npos ? 0 : start + 1;
  std::string line = raw.substr(start, end - start + 1);

  static const std::regex head(R"(^\s*score\s*:.*)", std::regex::icase);
  if (!std::regex_match(line, head))
    throw VerdictError("judge response has no 'score: N, collapsed: ...' trailer", raw);

  static const std::regex trailer(
      R"(^\s*score\s*:\s*([^,\s]+)\s*(?:,\s*collapsed\s*:\s*([^\s,]+))?\s*$)", std::regex::icase);
  std::smatch m;
  if (!std::regex_match(line, m, trailer)) throw JudgeParseError("malformed verdict trailer", raw);
  std::string tok = m[1].str();
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
      tok.size() > 2)
    throw JudgeParseError("judge score '" + tok + "' is not an integer in 1..5", raw);
  int score = std::stoi(tok);
  if (score < 1 || score > 5) throw JudgeParseError("judge score " + tok + " outside 1..5", raw);
  if (!m[2].matched) throw JudgeParseError("verdict trailer lacks the collapsed flag", raw);
  std::string flag = m[2].str();
  for (char& c : flag) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (flag != "true" && flag != "false")
    throw JudgeParseError("collapsed flag '" + m[2].str() + "' is not true/false", raw);
  return JudgeVerdict{score, flag == "true", raw};
}

JudgeClient::JudgeClient(JudgeClientConfig cfg, std::shared_ptr<JsonTransport> transport)
    : cfg_(std::move(cfg)), transport_(std::move(transport)) {
  if (!transport_) throw ConfigError("judge client needs a transport");
  if (cfg_.max_in_flight == 0) throw ConfigError("judge max_in_flight must be >= 1");
}

JudgeClient::JudgeClient(JudgeClientConfig cfg)
    : JudgeClient(cfg, cfg.endpoint.configured()
                           ? std::make_shared<HttpJsonTransport>(cfg.endpoint)
                           : throw ConfigError("judge endpoint is not configured (set DCR_JUDGE_URL or --judge-url)")) {}

namespace {

std::string utc_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

void JudgeClient::audit(const nlohmann::json& request, const nlohmann::json* response,
                        const std::string& error, std::size_t attempt) {
  if (cfg_.audit_log_path.empty()) return;
  nlohmann::ordered_json rec;
  rec["time"] = utc_now();
  rec["attempt"] = attempt;
  rec["request"] = request;
  rec["response"] = response ? *response : nlohmann::json();
  if (!error.empty()) rec["error"] = error;
  std::lock_guard<std::mutex> lock(audit_mutex_);
  std::ofstream out(cfg_.audit_log_path, std::ios::app);
  if (!out) throw ConfigError("cannot open judge audit log '" + cfg_.audit_log_path + "'");
  out << rec.dump() << "\n";
}

JudgeVerdict JudgeClient::judge_counted(const JudgeRequest& req, std::size_t* retries) {
  nlohmann::json body;
  body["model"] = cfg_.endpoint.model;
  body["messages"] = build_rubric_message(req);
  body["temperature"] = 0;

  std::size_t attempt = 0;
  nlohmann::json response;
  try {
    response = post_with_retries(*transport_, body, cfg_.retry, retries,
                                 [&](const TransportError& e) { audit(body, nullptr, e.what(), attempt++); });
  } catch (const std::exception& e) {
    audit(body, nullptr, e.what(), attempt);
    throw;
  }
  audit(body, &response, "", attempt);
  std::string raw;
  try {
    raw = chat_message_content(response);
  } catch (const FormatError& e) {
    throw VerdictError(e.what(), response.dump());
  }
  return parse_verdict(raw);
}

JudgeVerdict JudgeClient::judge(const JudgeRequest& req) {
  std::size_t retries = 0;
  auto record = [&] {
    std::lock_guard<std::mutex> lock(stats_mutex_);
    last_retries_ = retries;
    total_retries_ += retries;
  };
  try {
    JudgeVerdict v = judge_counted(req, &retries);
    record();
    return v;
  } catch (...) {
    record();
    throw;
  }
}

std::vector<JudgeOutcome> JudgeClient::judge_batch(const std::vector<JudgeRequest>& reqs) {
  std::vector<JudgeOutcome> out(reqs.size());
  auto run = [&](std::size_t i) {
    auto& o = out[i];
    std::size_t retries = 0;
    try {
      o.verdict = judge_counted(reqs[i], &retries);
    } catch (const VerdictError& e) {
      o.error = e.what();
      o.raw_response = e.raw_response();
    } catch (const std::exception& e) {
      o.error = e.what();
    }
    o.retries = retries;
    std::lock_guard<std::mutex> lock(stats_mutex_);
    total_retries_ += o.retries;
  };
  std::size_t workers = std::min(cfg_.max_in_flight, reqs.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < reqs.size(); ++i) run(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < reqs.size(); i = next++) run(i);
    });
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace dcr
