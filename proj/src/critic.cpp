#include "denserl/critic.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace denserl {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string uppercase(const std::string& s) {
  std::string out(s.size(), '\0');
  std::transform(s.begin(), s.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

std::string format_number(double v) {
  std::ostringstream oss;
  oss << v;
  return oss.str();
}

bool valid_label_token(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalpha(static_cast<unsigned char>(c)) && c != '_') return false;
  }
  return true;
}

}  // namespace

std::optional<double> LabelTable::value_of(const std::string& label) const {
  const std::string key = uppercase(label);
  for (const auto& [name, value] : entries) {
    if (uppercase(name) == key) return value;
  }
  return std::nullopt;
}

LabelTable LabelTable::sentiment() { return {{{"POSITIVE", 1.0}, {"NEGATIVE", -1.0}}}; }
LabelTable LabelTable::toxicity() { return {{{"TOXIC", -1.0}, {"NONTOXIC", 1.0}}}; }
LabelTable LabelTable::relevance() { return {{{"RELEVANT", 1.0}, {"IRRELEVANT", -1.0}}}; }

std::vector<Message> build_prompt(const CritiqueRequest& request) {
  if (request.task_description.empty()) {
    throw ConfigError("critique request requires a task description");
  }
  std::vector<Message> messages;

  std::string system = request.task_description;
  if (!request.steps.empty()) {
    system += "\n\nSteps:";
    for (std::size_t i = 0; i < request.steps.size(); ++i) {
      system += "\n" + std::to_string(i + 1) + ". " + request.steps[i];
    }
  }
  messages.push_back({"system", std::move(system)});

  for (const auto& [input, answer] : request.few_shot_examples) {
    messages.push_back({"user", input});
    messages.push_back({"assistant", render_spans(answer)});
  }

  std::string final_user = request.output_text;
  if (request.extrinsic_reward) {
    final_user += "\nEnvironment reward: " + format_number(*request.extrinsic_reward);
  }
  messages.push_back({"user", std::move(final_user)});
  return messages;
}

std::string render_spans(const std::vector<SpanAnnotation>& spans) {
  if (spans.empty()) return "NONE";
  std::string out;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (i > 0) out += "\n";
    out += spans[i].label + ": \"" + spans[i].text + "\"";
  }
  return out;
}

std::vector<SpanAnnotation> parse_response(const std::string& text, const LabelTable& labels,
                                           int* skipped_lines) {
  std::vector<SpanAnnotation> spans;
  bool saw_none = false;
  int skipped = 0;

  std::istringstream stream(text);
  std::string raw;
  while (std::getline(stream, raw)) {
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (uppercase(line) == "NONE") {
      saw_none = true;
      continue;
    }
    const std::size_t colon = line.find(':');
    if (colon == std::string::npos) {
      ++skipped;
      continue;
    }
    const std::string label = trim(line.substr(0, colon));
    const auto value = valid_label_token(label) ? labels.value_of(label) : std::nullopt;
    if (!value) {
      ++skipped;
      continue;
    }
    const std::string rest = trim(line.substr(colon + 1));
    const std::size_t open = rest.find('"');
    const std::size_t close = rest.rfind('"');
    if (open == std::string::npos || close <= open) {
      ++skipped;
      continue;
    }
    const std::string quoted = rest.substr(open + 1, close - open - 1);
    if (quoted.empty()) {
      ++skipped;
      continue;
    }
    spans.push_back({quoted, uppercase(label), *value});
  }

  if (skipped_lines) *skipped_lines += skipped;
  if (spans.empty() && !saw_none) {
    throw UnparseableResponse("no parseable span lines in critic response");
  }
  return spans;
}

double backoff_delay_seconds(int attempt, double base_seconds) {
  return base_seconds * std::pow(2.0, attempt);
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

Critic Critic::lexicon(Lexicon lex, std::string positive_label, std::string negative_label) {
  Critic c(Kind::kLexicon, "lexicon", 1);
  c.lexicon_ = std::move(lex);
  c.positive_label_ = std::move(positive_label);
  c.negative_label_ = std::move(negative_label);
  return c;
}

Critic Critic::remote(RemoteConfig config, LabelTable labels) {
  const int slots = std::clamp(config.max_concurrent, 1, 64);
  Critic c(Kind::kRemote, "remote:" + config.base_url + config.path, slots);
  c.remote_ = std::move(config);
  c.labels_ = std::move(labels);
  return c;
}

Critic Critic::scripted(std::vector<std::string> transcript, LabelTable labels) {
  Critic c(Kind::kScripted, "scripted", 1);
  c.labels_ = std::move(labels);
  for (auto& entry : transcript) c.shared_->transcript.push_back(std::move(entry));
  return c;
}

Critic Critic::self_critique(std::shared_ptr<const PolicyParams> policy,
                             std::vector<std::string> transcript, LabelTable labels) {
  Critic c(Kind::kSelfScripted, "self", 1);
  c.policy_ = std::move(policy);
  c.labels_ = std::move(labels);
  for (auto& entry : transcript) c.shared_->transcript.push_back(std::move(entry));
  return c;
}

Critic Critic::self_critique_remote(std::shared_ptr<const PolicyParams> policy,
                                    RemoteConfig config, LabelTable labels) {
  const int slots = std::clamp(config.max_concurrent, 1, 64);
  Critic c(Kind::kSelfRemote, "self-remote:" + config.base_url + config.path, slots);
  c.policy_ = std::move(policy);
  c.remote_ = std::move(config);
  c.labels_ = std::move(labels);
  return c;
}

CriticStats Critic::stats() const {
  std::lock_guard<std::mutex> lock(shared_->mutex);
  return shared_->stats;
}

std::string Critic::fingerprint(const CritiqueRequest& request) const {
  if (kind_ == Kind::kLexicon) return backend_id_ + '\x1f' + request.output_text;
  std::string key = backend_id_;
  for (const Message& m : build_prompt(request)) {
    key += '\x1f' + m.role + '\x1e' + m.content;
  }
  return key;
}

std::vector<SpanAnnotation> Critic::critique(const CritiqueRequest& request) {
  const std::string key = fingerprint(request);
  {
    std::lock_guard<std::mutex> lock(shared_->mutex);
    auto it = shared_->cache.find(key);
    if (it != shared_->cache.end()) {
      ++shared_->stats.cache_hits;
      return it->second;
    }
  }

  std::vector<SpanAnnotation> spans = run_backend(request);

  std::lock_guard<std::mutex> lock(shared_->mutex);
  ++shared_->stats.calls;
  shared_->cache.emplace(key, spans);
  return spans;
}

std::vector<SpanAnnotation> Critic::run_backend(const CritiqueRequest& request) {
  switch (kind_) {
    case Kind::kLexicon:
      return lexicon_spans(request.output_text);
    case Kind::kScripted:
    case Kind::kSelfScripted: {
      int skipped = 0;
      auto spans = parse_response(next_transcript_entry(), labels_, &skipped);
      std::lock_guard<std::mutex> lock(shared_->mutex);
      shared_->stats.skipped_lines += skipped;
      return spans;
    }
    case Kind::kRemote:
    case Kind::kSelfRemote: {
      const std::string body = remote_completion(build_prompt(request));
      int skipped = 0;
      auto spans = parse_response(body, labels_, &skipped);
      std::lock_guard<std::mutex> lock(shared_->mutex);
      shared_->stats.skipped_lines += skipped;
      return spans;
    }
  }
  throw CriticError("unknown critic backend");
}

std::vector<SpanAnnotation> Critic::lexicon_spans(const std::string& output_text) const {
  std::vector<SpanAnnotation> spans;
  for (const Lexicon::Hit& hit : lexicon_.scan(output_text)) {
    SpanAnnotation span;
    span.text = output_text.substr(static_cast<std::size_t>(hit.char_start),
                                   static_cast<std::size_t>(hit.char_end - hit.char_start));
    span.label = hit.value > 0 ? positive_label_ : negative_label_;
    span.value = hit.value;
    spans.push_back(std::move(span));
  }
  return spans;
}

std::string Critic::next_transcript_entry() {
  std::lock_guard<std::mutex> lock(shared_->mutex);
  if (shared_->transcript.empty()) {
    throw TranscriptExhausted("scripted critic transcript exhausted");
  }
  std::string entry = std::move(shared_->transcript.front());
  shared_->transcript.pop_front();
  return entry;
}

std::string Critic::remote_completion(const std::vector<Message>& messages) {
  shared_->remote_slots.acquire();
  struct Release {
    std::counting_semaphore<64>& s;
    ~Release() { s.release(); }
  } release{shared_->remote_slots};

  nlohmann::json payload;
  payload["model"] = remote_.model;
  payload["temperature"] = remote_.temperature;
  payload["messages"] = nlohmann::json::array();
  for (const Message& m : messages) {
    payload["messages"].push_back({{"role", m.role}, {"content", m.content}});
  }
  const std::string body = payload.dump();

  httplib::Client client(remote_.base_url);
  const auto timeout = std::chrono::milliseconds(static_cast<long>(remote_.timeout_seconds * 1000));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);

  httplib::Headers headers;
  if (!remote_.api_key_env.empty()) {
    if (const char* key = std::getenv(remote_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
  }

  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= remote_.max_retries; ++attempt) {
    if (attempt > 0) {
      const double delay = backoff_delay_seconds(attempt - 1, remote_.backoff_base_seconds);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    auto res = client.Post(remote_.path, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "http status " + std::to_string(res->status);
      continue;
    }
    try {
      const auto json = nlohmann::json::parse(res->body);
      return json.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const std::exception& e) {
      last_error = std::string("malformed completion payload: ") + e.what();
    }
  }

  {
    std::lock_guard<std::mutex> lock(shared_->mutex);
    ++shared_->stats.transport_failures;
  }
  throw CriticUnavailable("critic endpoint failed after " + std::to_string(remote_.max_retries + 1) +
                          " attempts: " + last_error);
}

}  // namespace denserl
