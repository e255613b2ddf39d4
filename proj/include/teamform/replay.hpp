#pragma once

// Episode storage for off-policy recurrent training. Whole episodes only:
// hidden states are always reconstructed from the episode start.

#include "teamform/attention.hpp"
#include "teamform/matching.hpp"

namespace teamform {

template <class Real>
struct Episode {
  // State-indexed arrays, length n+1 for an n-step episode.
  std::vector<EntityMatrix<Real>> states;
  std::vector<BinaryMatrix> obs_masks;
  std::vector<Grouping> groupings;          // grouping active when entering the state
  std::vector<std::vector<uint8_t>> alive;  // per-agent alive flags
  // Step-indexed arrays, length n.
  std::vector<std::vector<int>> actions;  // dead agents hold action 0
  std::vector<double> rewards;

  bool terminated = false;  // final step reached a terminal state (vs. time cap)
  int agent_count = 0;
  int leader_count = 0;
  std::vector<int> leader_slots;  // episode-fixed leader -> group-one-hot slot
  long long episode_id = 0;

  int length() const { return int(rewards.size()); }

  void validate() const {
    const size_t n = rewards.size();
    if (states.size() != n + 1 || obs_masks.size() != n + 1 || groupings.size() != n + 1 ||
        alive.size() != n + 1 || actions.size() != n)
      throw std::invalid_argument("Episode: array lengths inconsistent");
  }
};

template <class Real>
struct TransitionView {
  const EntityMatrix<Real>& state;
  const BinaryMatrix& obs_mask;
  const std::vector<int>& joint_action;
  double reward;
  const EntityMatrix<Real>& next_state;
  const BinaryMatrix& next_obs_mask;
  bool terminal;
  const Grouping& grouping;  // grouping active at this step
  const std::vector<uint8_t>& alive;
  long long episode_id;
  int step_index;
};

template <class Real>
TransitionView<Real> transition(const Episode<Real>& ep, int t) {
  if (t < 0 || t >= ep.length())
    throw std::invalid_argument("transition: step index out of range");
  return TransitionView<Real>{ep.states[t],
                              ep.obs_masks[t],
                              ep.actions[t],
                              ep.rewards[t],
                              ep.states[t + 1],
                              ep.obs_masks[t + 1],
                              t == ep.length() - 1 && ep.terminated,
                              ep.groupings[t],
                              ep.alive[t],
                              ep.episode_id,
                              t};
}

// Ring buffer over whole episodes.
template <class Real>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
  }

  void add(Episode<Real> episode) {
    episode.validate();
    if (episodes_.size() < capacity_) {
      episodes_.push_back(std::move(episode));
    } else {
      episodes_[next_] = std::move(episode);
      next_ = (next_ + 1) % capacity_;
    }
  }

  size_t size() const { return episodes_.size(); }
  size_t capacity() const { return capacity_; }
  const Episode<Real>& at(size_t i) const { return episodes_[i]; }

  // Uniform sample of `count` distinct episodes.
  std::vector<const Episode<Real>*> sample(int count, std::mt19937_64& rng) const {
    if (count <= 0 || size_t(count) > episodes_.size())
      throw std::invalid_argument("ReplayBuffer: cannot sample " + std::to_string(count) +
                                  " of " + std::to_string(episodes_.size()) + " episodes");
    std::vector<size_t> idx(episodes_.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    for (int k = 0; k < count; ++k) {
      size_t j = k + size_t(rng() % (idx.size() - k));
      std::swap(idx[k], idx[j]);
    }
    std::vector<const Episode<Real>*> out(count);
    for (int k = 0; k < count; ++k) out[k] = &episodes_[idx[k]];
    return out;
  }

 private:
  size_t capacity_;
  std::vector<Episode<Real>> episodes_;
  size_t next_ = 0;
};

}  // namespace teamform
