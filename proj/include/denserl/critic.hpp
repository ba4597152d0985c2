#ifndef DENSERL_CRITIC_HPP_
#define DENSERL_CRITIC_HPP_

#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "denserl/core.hpp"
#include "denserl/lexicon.hpp"
#include "denserl/policy.hpp"
#include "denserl/reward.hpp"

namespace denserl {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Base for critic failures; callers substitute zero intrinsic rewards and
/// keep training.
class CriticError : public Error {
 public:
  using Error::Error;
};

class UnparseableResponse : public CriticError {
 public:
  using CriticError::CriticError;
};

class TranscriptExhausted : public CriticError {
 public:
  using CriticError::CriticError;
};

class CriticUnavailable : public CriticError {
 public:
  using CriticError::CriticError;
};

// ---------------------------------------------------------------------------
// Request / answer format
// ---------------------------------------------------------------------------

struct Message {
  std::string role;  // "system" | "user" | "assistant"
  std::string content;
};

struct CritiqueRequest {
  std::string task_description;
  std::vector<std::string> steps;
  std::vector<std::pair<std::string, std::vector<SpanAnnotation>>> few_shot_examples;
  std::string output_text;
  std::optional<double> extrinsic_reward;
};

/// Maps answer labels (uppercase) onto signed span values.
struct LabelTable {
  std::vector<std::pair<std::string, double>> entries;

  std::optional<double> value_of(const std::string& label) const;

  static LabelTable sentiment();  // POSITIVE +1, NEGATIVE -1
  static LabelTable toxicity();   // TOXIC -1, NONTOXIC +1
  static LabelTable relevance();  // RELEVANT +1, IRRELEVANT -1
};

/// One system message carrying the task definition and the enumerated
/// assessment steps, alternating user/assistant messages for the few-shot
/// examples, and a final user message with the sample to assess (plus an
/// "Environment reward: <value>" line when a reward is supplied).
std::vector<Message> build_prompt(const CritiqueRequest& request);

/// The machine-checkable answer format: one `LABEL: "span"` line per span,
/// or `NONE` for an empty list.
std::string render_spans(const std::vector<SpanAnnotation>& spans);

/// Parses `LABEL: "span"` lines. Unparseable lines are skipped and counted in
/// *skipped_lines when given. Throws UnparseableResponse when nothing parses
/// and the response is not NONE.
std::vector<SpanAnnotation> parse_response(const std::string& text, const LabelTable& labels,
                                           int* skipped_lines = nullptr);

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

struct RemoteConfig {
  std::string base_url;  // e.g. http://localhost:8080
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-3.5-turbo";
  double temperature = 0.0;
  std::string api_key_env = "CRITIC_API_KEY";
  int max_retries = 3;
  double backoff_base_seconds = 1.0;
  double timeout_seconds = 30.0;
  int max_concurrent = 8;
};

/// Exponential backoff delay before retry `attempt` (0-based).
double backoff_delay_seconds(int attempt, double base_seconds);

struct CriticStats {
  long calls = 0;
  long cache_hits = 0;
  long skipped_lines = 0;
  long transport_failures = 0;
};

/// Span annotator with pluggable backends. Thread-safe; responses are cached
/// by request fingerprint so repeated identical outputs cost one call. Never
/// mutates policy parameters.
class Critic {
 public:
  static Critic lexicon(Lexicon lex, std::string positive_label = "POSITIVE",
                        std::string negative_label = "NEGATIVE");
  static Critic remote(RemoteConfig config, LabelTable labels);
  static Critic scripted(std::vector<std::string> transcript, LabelTable labels);
  /// Same transport as scripted/remote, but bound to the policy's own weights.
  static Critic self_critique(std::shared_ptr<const PolicyParams> policy,
                              std::vector<std::string> transcript, LabelTable labels);
  static Critic self_critique_remote(std::shared_ptr<const PolicyParams> policy,
                                     RemoteConfig config, LabelTable labels);

  std::vector<SpanAnnotation> critique(const CritiqueRequest& request);

  const std::string& backend_id() const { return backend_id_; }
  bool deterministic() const { return kind_ != Kind::kRemote && kind_ != Kind::kSelfRemote; }
  const PolicyParams* policy_handle() const { return policy_.get(); }
  CriticStats stats() const;

 private:
  enum class Kind { kLexicon, kRemote, kScripted, kSelfScripted, kSelfRemote };

  struct Shared {
    explicit Shared(int slots) : remote_slots(slots) {}
    std::mutex mutex;
    std::unordered_map<std::string, std::vector<SpanAnnotation>> cache;
    CriticStats stats;
    std::deque<std::string> transcript;
    std::counting_semaphore<64> remote_slots;
  };

  Critic(Kind kind, std::string backend_id, int slots)
      : kind_(kind), backend_id_(std::move(backend_id)), shared_(std::make_unique<Shared>(slots)) {}

  std::string fingerprint(const CritiqueRequest& request) const;
  std::vector<SpanAnnotation> run_backend(const CritiqueRequest& request);
  std::vector<SpanAnnotation> lexicon_spans(const std::string& output_text) const;
  std::string next_transcript_entry();
  std::string remote_completion(const std::vector<Message>& messages);

  Kind kind_;
  std::string backend_id_;
  Lexicon lexicon_;
  std::string positive_label_ = "POSITIVE";
  std::string negative_label_ = "NEGATIVE";
  LabelTable labels_;
  RemoteConfig remote_;
  std::shared_ptr<const PolicyParams> policy_;
  std::unique_ptr<Shared> shared_;
};

}  // namespace denserl

#endif  // DENSERL_CRITIC_HPP_
