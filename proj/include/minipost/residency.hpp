#pragma once

#include <chrono>
#include <cstdint>
#include <mutex>
#include <span>
#include <string>
#include <vector>

namespace minipost {

// Logical two-tier residency manager. At most one model occupies the fast
// tier at any instant; switching models evicts the prior resident first
// and every transition lands in the ledger. Wall-clock swap cost is a
// configurable synthetic delay so throughput experiments can model slow
// tiers without real hardware.
enum class Tier : std::uint8_t { kFast, kSlow };
enum class ResidencyAction : std::uint8_t { kLoad, kEvict };

struct ResidencyEvent {
    std::uint64_t time = 0;  // logical clock, strictly increasing
    std::string model_id;
    Tier tier = Tier::kFast;
    ResidencyAction action = ResidencyAction::kLoad;
};

class ResidencyScheduler {
public:
    explicit ResidencyScheduler(
        std::chrono::microseconds swap_delay = std::chrono::microseconds{0})
        : swap_delay_(swap_delay) {}

    void register_model(const std::string& id);

    // Exclusive use of the fast tier. Held tokens serialize access: any
    // acquire while a token is outstanding is rejected (deadlock guard),
    // including re-acquiring the same model.
    class Token {
    public:
        Token() = default;
        Token(Token&& other) noexcept { swap(other); }
        Token& operator=(Token&& other) noexcept {
            release();
            swap(other);
            return *this;
        }
        Token(const Token&) = delete;
        Token& operator=(const Token&) = delete;
        ~Token() { release(); }

        void release();
        bool active() const { return scheduler_ != nullptr; }
        const std::string& model_id() const { return model_id_; }

    private:
        friend class ResidencyScheduler;
        Token(ResidencyScheduler* s, std::string id)
            : scheduler_(s), model_id_(std::move(id)) {}
        void swap(Token& other) {
            std::swap(scheduler_, other.scheduler_);
            std::swap(model_id_, other.model_id_);
        }
        ResidencyScheduler* scheduler_ = nullptr;
        std::string model_id_;
    };

    Token acquire(const std::string& id);

    std::string fast_resident() const;
    std::vector<ResidencyEvent> ledger() const;

    // Replays a ledger and throws std::logic_error on any violation: more
    // than one fast-resident model, a load without prior eviction, an
    // eviction of a non-resident model, or a non-increasing clock.
    static void check_ledger(std::span<const ResidencyEvent> events);

private:
    void release_internal();

    mutable std::mutex mu_;
    std::chrono::microseconds swap_delay_;
    std::vector<std::string> registered_;
    std::vector<ResidencyEvent> events_;
    std::string fast_resident_;
    bool token_outstanding_ = false;
    std::string outstanding_id_;
    std::uint64_t clock_ = 0;
};

}  // namespace minipost
