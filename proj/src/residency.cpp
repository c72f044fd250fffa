#include "minipost/residency.hpp"

#include <algorithm>
#include <stdexcept>
#include <thread>

namespace minipost {

void ResidencyScheduler::register_model(const std::string& id) {
    std::lock_guard lock(mu_);
    if (std::find(registered_.begin(), registered_.end(), id) != registered_.end()) {
        throw std::invalid_argument("residency: model '" + id + "' already registered");
    }
    registered_.push_back(id);
}

ResidencyScheduler::Token ResidencyScheduler::acquire(const std::string& id) {
    bool need_delay = false;
    {
        std::lock_guard lock(mu_);
        if (std::find(registered_.begin(), registered_.end(), id) ==
            registered_.end()) {
            throw std::invalid_argument("residency: model '" + id + "' not registered");
        }
        if (token_outstanding_) {
            throw std::logic_error("residency: acquire('" + id +
                                   "') while holding a token for '" +
                                   outstanding_id_ + "'");
        }
        if (fast_resident_ != id) {
            if (!fast_resident_.empty()) {
                events_.push_back({++clock_, fast_resident_, Tier::kFast,
                                   ResidencyAction::kEvict});
            }
            events_.push_back({++clock_, id, Tier::kFast, ResidencyAction::kLoad});
            fast_resident_ = id;
            need_delay = swap_delay_.count() > 0;
        }
        token_outstanding_ = true;
        outstanding_id_ = id;
    }
    if (need_delay) {
        std::this_thread::sleep_for(swap_delay_);
    }
    return Token(this, id);
}

void ResidencyScheduler::Token::release() {
    if (scheduler_) {
        scheduler_->release_internal();
        scheduler_ = nullptr;
        model_id_.clear();
    }
}

void ResidencyScheduler::release_internal() {
    std::lock_guard lock(mu_);
    token_outstanding_ = false;
    outstanding_id_.clear();
    // the model stays fast-resident until another model needs the slot
}

std::string ResidencyScheduler::fast_resident() const {
    std::lock_guard lock(mu_);
    return fast_resident_;
}

std::vector<ResidencyEvent> ResidencyScheduler::ledger() const {
    std::lock_guard lock(mu_);
    return events_;
}

void ResidencyScheduler::check_ledger(std::span<const ResidencyEvent> events) {
    std::string resident;
    std::uint64_t last_time = 0;
    for (const auto& e : events) {
        if (e.time <= last_time) {
            throw std::logic_error("residency ledger: clock not strictly increasing");
        }
        last_time = e.time;
        if (e.tier != Tier::kFast) {
            continue;
        }
        if (e.action == ResidencyAction::kLoad) {
            if (!resident.empty()) {
                throw std::logic_error("residency ledger: load of '" + e.model_id +
                                       "' while '" + resident + "' is resident");
            }
            resident = e.model_id;
        } else {
            if (resident != e.model_id) {
                throw std::logic_error("residency ledger: evict of non-resident '" +
                                       e.model_id + "'");
            }
            resident.clear();
        }
    }
}

}  // namespace minipost
