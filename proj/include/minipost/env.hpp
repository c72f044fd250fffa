#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "minipost/rng.hpp"
#include "minipost/tokens.hpp"

namespace minipost {

// Deterministic character n-gram feature hashing (n = 1..3, FNV-1a into
// `dim` buckets), L2-normalized. A stand-in for a learned sentence
// embedder behind the same retrieval contract.
Eigen::VectorXd embed_text(std::string_view text, int dim = 256);

struct Document {
    std::string doc_id;
    std::string text;
};

struct SearchHit {
    std::string doc_id;
    double score;
};

// Immutable after construction; shareable read-only across concurrent
// episodes.
class DocumentStore {
public:
    explicit DocumentStore(std::vector<Document> docs, int embed_dim = 256);
    static DocumentStore from_jsonl(const std::filesystem::path& path,
                                    int embed_dim = 256);

    // Exact cosine ranking, descending, ties broken by ascending doc_id;
    // returns min(k, size) hits. No re-ranking or post-processing.
    std::vector<SearchHit> search(const std::string& query, int k = 3) const;

    // Full text truncated to token_budget tokens with an explicit marker.
    // Unknown ids yield a structured error observation, never an
    // exception, so an agent can recover.
    std::string read(const std::string& doc_id, int token_budget) const;

    std::size_t size() const { return docs_.size(); }
    const std::vector<Document>& documents() const { return docs_; }
    int embed_dim() const { return embed_dim_; }

private:
    std::vector<Document> docs_;
    Eigen::MatrixXd embeddings_;  // one row per document, unit norm
    std::map<std::string, std::size_t> by_id_;
    int embed_dim_;
};

// Plain-text tool grammar, one call per assistant turn:
//   <tool>search: some query</tool>
//   <tool>read: doc_id</tool>
// Reasoning text may precede the block; anything after the closing marker
// is ignored. A turn without a block is a final answer.
struct ToolCall {
    enum class Kind { kSearch, kRead };
    Kind kind = Kind::kSearch;
    std::string argument;
};

enum class ToolParse { kNone, kOk, kMalformed };

struct ParsedTurn {
    ToolParse status = ToolParse::kNone;
    ToolCall call;
};

ParsedTurn parse_tool_call(std::string_view turn_text);

enum class TurnRole : std::uint8_t { kSystem, kUser, kAssistant, kTool };

std::string_view turn_role_name(TurnRole role);

struct Turn {
    TurnRole role;
    TokenSequence tokens;  // role marker + content; mask 1 only on
                           // assistant-generated tokens
    std::string text;      // decoded content, for traces and parsing
};

struct Trajectory {
    std::vector<Turn> turns;
    int assistant_turns = 0;
    bool terminal = false;
    std::string final_answer;

    TokenSequence flatten() const;
    nlohmann::json to_json() const;
};

void save_trace(const std::filesystem::path& path, const Trajectory& t);

struct EnvConfig {
    int max_turns = 5;              // assistant turns per episode
    int tool_response_budget = 1024;  // tokens per tool observation
    int search_k = 3;
    bool tools_enabled = true;
};

// One episode per instance. The episode appends the policy's assistant
// turns, executes at most one tool call per turn and terminates on a
// plain-text answer or at the turn budget.
class Episode {
public:
    Episode(const DocumentStore* store, EnvConfig cfg, std::string system_text,
            std::string question);

    bool terminal() const { return trajectory_.terminal; }
    const Trajectory& trajectory() const { return trajectory_; }

    // Flattened context plus a trailing <asst> marker: the prompt for the
    // policy's next turn.
    TokenSequence context_with_asst() const;

    // Feed the policy's generated tokens for one assistant turn (marker
    // excluded; mask 1 on generated tokens is preserved).
    void step(const TokenSequence& generated);

private:
    void append_tool_turn(const std::string& observation);

    const DocumentStore* store_;
    EnvConfig cfg_;
    Trajectory trajectory_;
};

// Policy interface: context tokens in, generated turn tokens out (without
// the leading <asst> marker).
using TurnPolicy = std::function<TokenSequence(const TokenSequence&, Rng&)>;

Trajectory collect_trajectory(const TurnPolicy& policy, const DocumentStore* store,
                              const EnvConfig& cfg, const std::string& system_text,
                              const std::string& question, Rng& rng);

}  // namespace minipost
