#include "minipost/data.hpp"

#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace minipost {

void InstructionExample::validate() const {
    if (user.empty()) {
        throw std::invalid_argument("InstructionExample: user must be nonempty");
    }
    if (response.empty()) {
        throw std::invalid_argument("InstructionExample: response must be nonempty");
    }
}

namespace {

std::string join_lines(const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) out += "\n";
        out += parts[i];
    }
    return out;
}

}  // namespace

InstructionExample augment_placement(InstructionExample ex, Rng& rng) {
    if (ex.constraints.empty()) {
        return ex;
    }
    const std::string joined = join_lines(ex.constraints);
    if (rng.bernoulli(0.5)) {
        ex.system = ex.system.empty() ? joined : ex.system + "\n" + joined;
    } else {
        ex.user += "\n" + joined;
    }
    ex.constraints.clear();
    return ex;
}

InstructionExample augment_placement(InstructionExample ex, std::uint64_t seed) {
    Rng rng(seed);
    return augment_placement(std::move(ex), rng);
}

TokenSequence render(const InstructionExample& ex) {
    ex.validate();
    TokenSequence out;
    out.push_back(tok::kSys, 0);
    for (int id : tok::encode_bytes(ex.system)) out.push_back(id, 0);
    out.push_back(tok::kUsr, 0);
    for (int id : tok::encode_bytes(ex.user)) out.push_back(id, 0);
    out.push_back(tok::kAsst, 0);
    for (int id : tok::encode_bytes(ex.response)) out.push_back(id, 1);
    out.push_back(tok::kEos, 1);
    return out;
}

std::vector<PackedBatch> pack(const std::vector<TokenSequence>& examples,
                              int pack_len, PackStats* stats) {
    if (pack_len < 1) {
        throw std::invalid_argument("pack: pack_len must be positive");
    }
    std::vector<PackedBatch> bins;
    PackStats local;
    for (const auto& ex : examples) {
        ex.validate();
        const int len = static_cast<int>(ex.size());
        if (len > pack_len) {
            ++local.skipped_oversize;
            continue;
        }
        PackedBatch* target = nullptr;
        for (auto& bin : bins) {
            if (static_cast<int>(bin.tokens.size()) + len <= pack_len) {
                target = &bin;
                break;
            }
        }
        if (!target) {
            bins.emplace_back();
            bins.back().pack_len = pack_len;
            target = &bins.back();
        }
        const int begin = static_cast<int>(target->tokens.size());
        target->tokens.insert(target->tokens.end(), ex.ids.begin(), ex.ids.end());
        if (ex.has_mask()) {
            target->loss_mask.insert(target->loss_mask.end(), ex.loss_mask.begin(),
                                     ex.loss_mask.end());
        } else {
            target->loss_mask.insert(target->loss_mask.end(), ex.ids.size(), 0);
        }
        target->segments.emplace_back(begin, begin + len);
        ++local.packed;
    }
    for (auto& bin : bins) {
        bin.tokens.resize(static_cast<std::size_t>(pack_len), tok::kPad);
        bin.loss_mask.resize(static_cast<std::size_t>(pack_len), 0);
    }
    if (stats) *stats = local;
    return bins;
}

std::vector<InstructionExample> build_mixture(
    const MixtureSpec& spec,
    const std::map<std::string, std::vector<InstructionExample>>& sources,
    MixtureStats* stats) {
    std::vector<InstructionExample> out;
    MixtureStats local;
    for (std::size_t s = 0; s < spec.counts.size(); ++s) {
        const auto& [tag, count] = spec.counts[s];
        auto it = sources.find(tag);
        if (it == sources.end()) {
            throw std::invalid_argument("build_mixture: unknown source tag '" + tag + "'");
        }
        const auto& source = it->second;
        Rng rng(derive_seed(spec.seed, "mixture-source", s));
        if (count <= source.size()) {
            // partial Fisher-Yates over an index vector: exact sample
            // without replacement
            std::vector<std::size_t> idx(source.size());
            std::iota(idx.begin(), idx.end(), 0);
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t j =
                    i + static_cast<std::size_t>(rng.below(idx.size() - i));
                std::swap(idx[i], idx[j]);
                out.push_back(source[idx[i]]);
            }
        } else {
            if (source.empty()) {
                throw std::invalid_argument("build_mixture: source '" + tag +
                                            "' is empty but count > 0");
            }
            local.with_replacement_sources.push_back(tag);
            for (std::size_t i = 0; i < count; ++i) {
                out.push_back(source[rng.below(source.size())]);
            }
        }
    }
    Rng shuffle_rng(derive_seed(spec.seed, "mixture-shuffle"));
    shuffle_rng.shuffle(out);
    if (stats) *stats = local;
    return out;
}

std::vector<InstructionExample> load_jsonl_corpus(
    const std::filesystem::path& path, std::string_view default_tag) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open corpus file: " + path.string());
    }
    std::vector<InstructionExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        InstructionExample ex;
        try {
            const auto j = nlohmann::json::parse(line);
            ex.system = j.value("system", std::string{});
            ex.user = j.at("user").get<std::string>();
            ex.response = j.at("response").get<std::string>();
            if (j.contains("constraints")) {
                ex.constraints = j.at("constraints").get<std::vector<std::string>>();
            }
            ex.source_tag = j.value("source_tag", std::string(default_tag));
            ex.validate();
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": bad corpus line: " + e.what());
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace minipost
