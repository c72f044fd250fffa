#include "minipost/env.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "minipost/metrics.hpp"

namespace minipost {

Eigen::VectorXd embed_text(std::string_view text, int dim) {
    if (text.empty()) {
        throw std::invalid_argument("embed_text: text must be nonempty");
    }
    if (dim < 1) {
        throw std::invalid_argument("embed_text: dim must be positive");
    }
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
    for (int n = 1; n <= 3; ++n) {
        if (static_cast<std::size_t>(n) > text.size()) break;
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= text.size(); ++i) {
            const std::uint64_t h = fnv1a64(text.data() + i, static_cast<std::size_t>(n));
            v[static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(dim))] += 1.0;
        }
    }
    return v / v.norm();
}

DocumentStore::DocumentStore(std::vector<Document> docs, int embed_dim)
    : docs_(std::move(docs)), embed_dim_(embed_dim) {
    if (docs_.empty()) {
        throw std::invalid_argument("DocumentStore: need at least one document");
    }
    embeddings_.resize(static_cast<Eigen::Index>(docs_.size()), embed_dim);
    for (std::size_t i = 0; i < docs_.size(); ++i) {
        const auto& d = docs_[i];
        if (d.doc_id.empty()) {
            throw std::invalid_argument("DocumentStore: empty doc_id");
        }
        if (!by_id_.emplace(d.doc_id, i).second) {
            throw std::invalid_argument("DocumentStore: duplicate doc_id '" +
                                        d.doc_id + "'");
        }
        embeddings_.row(static_cast<Eigen::Index>(i)) =
            embed_text(d.text, embed_dim).transpose();
    }
}

DocumentStore DocumentStore::from_jsonl(const std::filesystem::path& path,
                                        int embed_dim) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open document corpus: " + path.string());
    }
    std::vector<Document> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            docs.push_back({j.at("doc_id").get<std::string>(),
                            j.at("text").get<std::string>()});
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": bad document line: " + e.what());
        }
    }
    return DocumentStore(std::move(docs), embed_dim);
}

std::vector<SearchHit> DocumentStore::search(const std::string& query, int k) const {
    const Eigen::VectorXd q = embed_text(query, embed_dim_);
    const Eigen::VectorXd scores = embeddings_ * q;
    std::vector<std::size_t> order(docs_.size());
    std::iota(order.begin(), order.end(), 0);
    const auto better = [&](std::size_t a, std::size_t b) {
        if (scores[static_cast<Eigen::Index>(a)] !=
            scores[static_cast<Eigen::Index>(b)]) {
            return scores[static_cast<Eigen::Index>(a)] >
                   scores[static_cast<Eigen::Index>(b)];
        }
        return docs_[a].doc_id < docs_[b].doc_id;
    };
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k),
                                                   docs_.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(take),
                      order.end(), better);
    std::vector<SearchHit> hits;
    hits.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        hits.push_back({docs_[order[i]].doc_id,
                        scores[static_cast<Eigen::Index>(order[i])]});
    }
    return hits;
}

std::string DocumentStore::read(const std::string& doc_id, int token_budget) const {
    const auto it = by_id_.find(doc_id);
    if (it == by_id_.end()) {
        return "ERROR: unknown document";
    }
    const std::string& text = docs_[it->second].text;
    const auto tokens = tok::encode_bytes(text);
    if (static_cast<int>(tokens.size()) <= token_budget) {
        return text;
    }
    std::span<const int> head(tokens.data(), static_cast<std::size_t>(token_budget));
    return tok::decode_text(head) + "\n[truncated]";
}

namespace {

constexpr std::string_view kToolOpen = "<tool>";
constexpr std::string_view kToolClose = "</tool>";

std::string_view trim_view(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
        s.remove_prefix(1);
    }
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
        s.remove_suffix(1);
    }
    return s;
}

}  // namespace

ParsedTurn parse_tool_call(std::string_view turn_text) {
    ParsedTurn out;
    const std::size_t open = turn_text.find(kToolOpen);
    if (open == std::string_view::npos) {
        out.status = ToolParse::kNone;
        return out;
    }
    const std::size_t close = turn_text.find(kToolClose, open + kToolOpen.size());
    if (close == std::string_view::npos) {
        out.status = ToolParse::kMalformed;
        return out;
    }
    const std::string_view inner = trim_view(
        turn_text.substr(open + kToolOpen.size(), close - open - kToolOpen.size()));
    const std::size_t colon = inner.find(':');
    if (colon == std::string_view::npos) {
        out.status = ToolParse::kMalformed;
        return out;
    }
    const std::string_view name = trim_view(inner.substr(0, colon));
    const std::string_view arg = trim_view(inner.substr(colon + 1));
    if (arg.empty()) {
        out.status = ToolParse::kMalformed;
        return out;
    }
    if (name == "search") {
        out.call.kind = ToolCall::Kind::kSearch;
    } else if (name == "read") {
        out.call.kind = ToolCall::Kind::kRead;
    } else {
        out.status = ToolParse::kMalformed;
        return out;
    }
    out.call.argument = std::string(arg);
    out.status = ToolParse::kOk;
    return out;
}

std::string_view turn_role_name(TurnRole role) {
    switch (role) {
        case TurnRole::kSystem: return "system";
        case TurnRole::kUser: return "user";
        case TurnRole::kAssistant: return "assistant";
        case TurnRole::kTool: return "tool";
    }
    return "?";
}

TokenSequence Trajectory::flatten() const {
    TokenSequence out;
    for (const auto& turn : turns) {
        out.append(turn.tokens);
    }
    return out;
}

nlohmann::json Trajectory::to_json() const {
    nlohmann::json j;
    j["terminal"] = terminal;
    j["assistant_turns"] = assistant_turns;
    j["final_answer"] = final_answer;
    auto turns_json = nlohmann::json::array();
    for (const auto& turn : turns) {
        std::size_t mask_ones = 0;
        for (auto m : turn.tokens.loss_mask) mask_ones += m;
        turns_json.push_back({{"role", std::string(turn_role_name(turn.role))},
                              {"text", turn.text},
                              {"tokens", turn.tokens.ids.size()},
                              {"mask_ones", mask_ones}});
    }
    j["turns"] = std::move(turns_json);
    return j;
}

void save_trace(const std::filesystem::path& path, const Trajectory& t) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write trace: " + path.string());
    }
    os << t.to_json().dump(2) << "\n";
}

Episode::Episode(const DocumentStore* store, EnvConfig cfg, std::string system_text,
                 std::string question)
    : store_(store), cfg_(cfg) {
    if (question.empty()) {
        throw std::invalid_argument("Episode: question must be nonempty");
    }
    if (cfg_.max_turns < 1) {
        throw std::invalid_argument("Episode: max_turns must be >= 1");
    }
    if (!system_text.empty()) {
        Turn sys;
        sys.role = TurnRole::kSystem;
        sys.text = system_text;
        sys.tokens.push_back(tok::kSys, 0);
        for (int id : tok::encode_bytes(system_text)) sys.tokens.push_back(id, 0);
        trajectory_.turns.push_back(std::move(sys));
    }
    Turn user;
    user.role = TurnRole::kUser;
    user.text = question;
    user.tokens.push_back(tok::kUsr, 0);
    for (int id : tok::encode_bytes(question)) user.tokens.push_back(id, 0);
    trajectory_.turns.push_back(std::move(user));
}

TokenSequence Episode::context_with_asst() const {
    TokenSequence ctx = trajectory_.flatten();
    ctx.push_back(tok::kAsst, 0);
    return ctx;
}

void Episode::append_tool_turn(const std::string& observation) {
    Turn turn;
    turn.role = TurnRole::kTool;
    turn.text = observation;
    turn.tokens.push_back(tok::kTool, 0);
    for (int id : tok::encode_bytes(observation)) turn.tokens.push_back(id, 0);
    trajectory_.turns.push_back(std::move(turn));
}

void Episode::step(const TokenSequence& generated) {
    if (trajectory_.terminal) {
        throw std::logic_error("Episode::step: episode already terminal");
    }
    generated.validate();
    Turn turn;
    turn.role = TurnRole::kAssistant;
    turn.text = tok::decode_text(generated.ids);
    turn.tokens.push_back(tok::kAsst, 0);
    for (std::size_t i = 0; i < generated.ids.size(); ++i) {
        turn.tokens.push_back(generated.ids[i],
                              generated.has_mask() ? generated.loss_mask[i] : 1);
    }
    trajectory_.turns.push_back(std::move(turn));
    ++trajectory_.assistant_turns;
    const std::string& text = trajectory_.turns.back().text;

    const ParsedTurn parsed = parse_tool_call(text);
    if (parsed.status == ToolParse::kNone) {
        trajectory_.terminal = true;
        trajectory_.final_answer = std::string(trim_view(text));
        return;
    }
    if (trajectory_.assistant_turns >= cfg_.max_turns) {
        // turn budget exhausted mid-call: the call is not executed and the
        // raw turn text stands as the answer
        trajectory_.terminal = true;
        trajectory_.final_answer = std::string(trim_view(text));
        return;
    }
    if (parsed.status == ToolParse::kMalformed) {
        append_tool_turn("ERROR: malformed tool call");
        return;
    }
    if (!cfg_.tools_enabled) {
        append_tool_turn("ERROR: tools disabled");
        return;
    }
    if (parsed.call.kind == ToolCall::Kind::kSearch) {
        const auto hits = store_->search(parsed.call.argument, cfg_.search_k);
        std::string obs;
        char buf[64];
        for (const auto& hit : hits) {
            std::snprintf(buf, sizeof(buf), "%.4f", hit.score);
            if (!obs.empty()) obs += "\n";
            obs += hit.doc_id + " " + buf;
        }
        append_tool_turn(obs);
    } else {
        append_tool_turn(store_->read(parsed.call.argument, cfg_.tool_response_budget));
    }
}

Trajectory collect_trajectory(const TurnPolicy& policy, const DocumentStore* store,
                              const EnvConfig& cfg, const std::string& system_text,
                              const std::string& question, Rng& rng) {
    Episode episode(store, cfg, system_text, question);
    while (!episode.terminal()) {
        episode.step(policy(episode.context_with_asst(), rng));
    }
    return episode.trajectory();
}

}  // namespace minipost
