#include "minipost/reward.hpp"

#include <cctype>
#include <fstream>
#include <semaphore>
#include <stdexcept>

#include <httplib.h>
#include <json.hpp>

namespace minipost {

namespace {

constexpr std::string_view kOpenTag = "<thinking>";
constexpr std::string_view kCloseTag = "</thinking>";

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
    std::size_t count = 0;
    std::size_t pos = 0;
    while ((pos = text.find(needle, pos)) != std::string_view::npos) {
        ++count;
        pos += needle.size();
    }
    return count;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
        s.remove_prefix(1);
    }
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
        s.remove_suffix(1);
    }
    return s;
}

}  // namespace

int format_reward(std::string_view response) {
    if (count_occurrences(response, kOpenTag) != 1 ||
        count_occurrences(response, kCloseTag) != 1) {
        return 0;
    }
    const std::size_t open = response.find(kOpenTag);
    const std::size_t close = response.find(kCloseTag);
    if (close < open) {
        return 0;
    }
    // the pair must open the response (leading whitespace tolerated)
    if (!trim(response.substr(0, open)).empty()) {
        return 0;
    }
    // nonempty final content after the closing tag
    return trim(response.substr(close + kCloseTag.size())).empty() ? 0 : 1;
}

double combine(int r_acc, int r_format, double overlong_penalty) {
    if (r_acc < 0 || r_acc > 2) {
        throw std::invalid_argument("combine: r_acc must be in {0,1,2}");
    }
    if (r_format < 0 || r_format > 1) {
        throw std::invalid_argument("combine: r_format must be in {0,1}");
    }
    if (overlong_penalty > 0.0 || overlong_penalty < -1.0) {
        throw std::invalid_argument("combine: overlong_penalty must be in [-1,0]");
    }
    return 0.9 * (r_acc / 2.0) + 0.1 * r_format + overlong_penalty;
}

double overlong_shaping(int response_len, int max_len, int buffer_len) {
    if (buffer_len <= 0 || buffer_len >= max_len) {
        throw std::invalid_argument(
            "overlong_shaping: need 0 < buffer_len < max_len");
    }
    const int soft_cap = max_len - buffer_len;
    if (response_len <= soft_cap) {
        return 0.0;
    }
    if (response_len >= max_len) {
        return -1.0;
    }
    return -static_cast<double>(response_len - soft_cap) /
           static_cast<double>(buffer_len);
}

std::string normalize_answer(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : trim(text)) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = true;
            continue;
        }
        if (pending_space && !out.empty()) {
            out.push_back(' ');
        }
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

AliasTable load_alias_table(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open alias table: " + path.string());
    }
    nlohmann::json j;
    is >> j;
    AliasTable table;
    for (const auto& [key, value] : j.items()) {
        table[key] = value.get<std::vector<std::string>>();
    }
    return table;
}

JudgeVerdict ProgrammaticJudge::evaluate(const std::string& /*prompt*/,
                                         const std::string& response,
                                         const std::string& reference) {
    const std::string resp = normalize_answer(response);
    const std::string ref = normalize_answer(reference);
    if (!resp.empty() && resp == ref) {
        return {2, "exact match after normalization", false};
    }
    auto it = aliases_.find(reference);
    if (it == aliases_.end()) {
        it = aliases_.find(ref);
    }
    if (it != aliases_.end()) {
        for (const auto& alias : it->second) {
            if (resp == normalize_answer(alias)) {
                return {1, "matched registered alias", false};
            }
        }
    }
    return {0, "no match against reference or aliases", false};
}

namespace {

const char* kJudgePromptTemplate =
    R"(You are an expert evaluator. Your task is to evaluate how well a response addresses a given prompt according to specific evaluation criteria.

# Task
Evaluate the response below using a 3-level scoring system:
- **Score 0**: The response is incorrect, irrelevant, or does not address the requirements
- **Score 1**: The response partially addresses the requirements but has significant gaps, errors, or missing information
- **Score 2**: The response fully addresses all requirements correctly and completely

# Evaluation Criteria
{llm_judge_prompt}

# User Prompt
{prompt}

# Response to Evaluate
{response_to_judge}

# Instructions
1. Carefully check if the response meets ALL requirements specified in the evaluation criteria
2. Assign a score of 0, 1, or 2 based on how well it meets the criteria
3. Provide a brief explanation justifying your score
4. Return your evaluation in the following JSON format:

{
  "score": <0, 1, or 2>,
  "explanation": "<Brief explanation of why you gave this score>"
}

{ground truth})";

const char* kAccuracyCriteriaTemplate =
    R"(To correctly answer this question, the response must match the following answer:

{ground_truth})";

void replace_once(std::string& text, std::string_view placeholder,
                  const std::string& value) {
    const std::size_t pos = text.find(placeholder);
    if (pos == std::string::npos) {
        throw std::logic_error("judge template is missing placeholder: " +
                               std::string(placeholder));
    }
    text.replace(pos, placeholder.size(), value);
}

}  // namespace

const std::string& judge_prompt_template() {
    static const std::string t = kJudgePromptTemplate;
    return t;
}

const std::string& accuracy_criteria_template() {
    static const std::string t = kAccuracyCriteriaTemplate;
    return t;
}

std::string render_judge_prompt(const std::string& criteria,
                                const std::string& prompt,
                                const std::string& response,
                                const std::string& ground_truth) {
    std::string out = judge_prompt_template();
    replace_once(out, "{llm_judge_prompt}", criteria);
    replace_once(out, "{prompt}", prompt);
    replace_once(out, "{response_to_judge}", response);
    replace_once(out, "{ground truth}", ground_truth);
    return out;
}

JudgeVerdict TemplateJudge::evaluate(const std::string& prompt,
                                     const std::string& response,
                                     const std::string& reference) {
    std::string criteria = accuracy_criteria_template();
    replace_once(criteria, "{ground_truth}", reference);
    const std::string rendered =
        render_judge_prompt(criteria, prompt, response, reference);

    auto try_parse = [](const std::string& reply) -> std::optional<JudgeVerdict> {
        const std::size_t open = reply.find('{');
        const std::size_t close = reply.rfind('}');
        if (open == std::string::npos || close == std::string::npos || close < open) {
            return std::nullopt;
        }
        try {
            const auto j = nlohmann::json::parse(reply.substr(open, close - open + 1));
            const int score = j.at("score").get<int>();
            if (score < 0 || score > 2) {
                return std::nullopt;
            }
            return JudgeVerdict{score, j.value("explanation", std::string{}), false};
        } catch (const std::exception&) {
            return std::nullopt;
        }
    };

    for (int attempt = 0; attempt < 2; ++attempt) {
        if (auto verdict = try_parse(completer_(rendered))) {
            return *verdict;
        }
    }
    return {0, "judge reply could not be parsed", true};
}

struct HttpJudgeClient::Impl {
    Impl(std::string host_in, int port_in, std::string path_in, int max_in_flight)
        : host(std::move(host_in)), port(port_in), path(std::move(path_in)),
          slots(max_in_flight) {}
    std::string host;
    int port;
    std::string path;
    std::counting_semaphore<64> slots;
};

HttpJudgeClient::HttpJudgeClient(std::string host, int port, std::string path,
                                 int max_in_flight)
    : impl_(std::make_unique<Impl>(std::move(host), port, std::move(path),
                                   max_in_flight)) {
    if (max_in_flight < 1 || max_in_flight > 64) {
        throw std::invalid_argument("HttpJudgeClient: max_in_flight must be in [1,64]");
    }
}

HttpJudgeClient::~HttpJudgeClient() = default;

std::string HttpJudgeClient::complete(const std::string& prompt) {
    impl_->slots.acquire();
    struct Release {
        std::counting_semaphore<64>* s;
        ~Release() { s->release(); }
    } release{&impl_->slots};
    httplib::Client client(impl_->host, impl_->port);
    const nlohmann::json body = {{"prompt", prompt}};
    auto res = client.Post(impl_->path, body.dump(), "application/json");
    if (!res) {
        throw std::runtime_error("judge endpoint unreachable: " + impl_->host + ":" +
                                 std::to_string(impl_->port));
    }
    return res->body;
}

CompletionFn HttpJudgeClient::as_completion_fn() {
    return [this](const std::string& prompt) { return complete(prompt); };
}

}  // namespace minipost
