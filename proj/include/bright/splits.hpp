// Patient-level data splitting: holdout split, stratified grouped k-fold,
// and the leakage audit. All slides of a patient always land in the same
// split or fold.
#pragma once

#include <bright/common.hpp>
#include <bright/manifest.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

// Holdout: value 0 = train, 1 = val. K-fold: value = fold index (the
// patient's validation fold).
struct SplitAssignment {
  std::map<std::string, int> patient_to_group;

  int group_of_patient(const std::string& patient_id) const {
    auto it = patient_to_group.find(patient_id);
    if (it == patient_to_group.end()) {
      throw std::invalid_argument("split: unknown patient '" + patient_id + "'");
    }
    return it->second;
  }

  int group_of(const SlideRecord& rec) const { return group_of_patient(rec.patient_id); }
};

namespace split_detail {

struct Patient {
  std::string id;
  int64_t n_slides = 0;
  std::string strat_label;  // majority label when stratifying
};

inline std::vector<Patient> collect_patients(const std::vector<SlideRecord>& records,
                                             const std::string& stratify_column) {
  if (records.empty()) throw std::invalid_argument("split: no records");
  std::map<std::string, Patient> by_id;
  std::map<std::string, std::map<std::string, int64_t>> label_counts;
  for (const auto& r : records) {
    auto& p = by_id[r.patient_id];
    p.id = r.patient_id;
    ++p.n_slides;
    if (!stratify_column.empty()) ++label_counts[r.patient_id][label_of(r, stratify_column)];
  }
  std::vector<Patient> out;
  for (auto& [id, p] : by_id) {
    if (!stratify_column.empty()) {
      const auto& counts = label_counts[id];
      p.strat_label = std::max_element(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
                        if (a.second != b.second) return a.second < b.second;
                        return a.first > b.first;  // ties -> lexicographically first label
                      })->first;
    }
    out.push_back(p);
  }
  // Deterministic base order before shuffling.
  std::sort(out.begin(), out.end(), [](const Patient& a, const Patient& b) { return a.id < b.id; });
  return out;
}

}  // namespace split_detail

// Shuffles patients under the seed, then fills the train side until its
// slide count reaches the target fraction; the boundary patient makes the
// achieved fraction accurate to within one patient.
inline SplitAssignment patient_level_split(const std::vector<SlideRecord>& records,
                                           double train_fraction, uint64_t seed) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    throw std::invalid_argument("patient_level_split: train_fraction must be in (0, 1)");
  }
  auto patients = split_detail::collect_patients(records, "");
  if (patients.size() < 2) {
    throw std::invalid_argument("patient_level_split: need at least 2 patients");
  }
  int64_t total_slides = 0;
  for (const auto& p : patients) total_slides += p.n_slides;

  Rng rng(seed);
  Rng stream = rng.derive("patient_split");
  stream.shuffle(patients);

  const double target = train_fraction * double(total_slides);
  SplitAssignment out;
  int64_t train_slides = 0;
  for (const auto& p : patients) {
    const bool to_train = double(train_slides) < target;
    out.patient_to_group[p.id] = to_train ? 0 : 1;
    if (to_train) train_slides += p.n_slides;
  }
  // Both sides must be populated.
  bool has_val = false, has_train = false;
  for (const auto& [id, g] : out.patient_to_group) {
    (g == 0 ? has_train : has_val) = true;
  }
  if (!has_val) out.patient_to_group[patients.back().id] = 1;
  if (!has_train) out.patient_to_group[patients.front().id] = 0;
  return out;
}

// Stratified grouped k-fold: per label group, shuffled patients go greedily
// to the fold with the fewest patients of that label (ties: fewest slides,
// then lowest index). Pass an empty stratify column to disable
// stratification.
inline std::vector<SplitAssignment> kfold_by_patient(const std::vector<SlideRecord>& records,
                                                     int k, uint64_t seed,
                                                     const std::string& stratify_column = "") {
  if (k < 2) throw std::invalid_argument("kfold_by_patient: k must be >= 2");
  auto patients = split_detail::collect_patients(records, stratify_column);
  if (int(patients.size()) < k) {
    throw std::invalid_argument("kfold_by_patient: k = " + std::to_string(k) + " exceeds " +
                                std::to_string(patients.size()) + " patients");
  }

  Rng rng(seed);
  Rng stream = rng.derive("kfold");
  stream.shuffle(patients);

  // Stable grouping by stratification label (insertion order of shuffled list).
  std::vector<std::string> label_order;
  std::map<std::string, std::vector<split_detail::Patient>> by_label;
  for (const auto& p : patients) {
    if (!by_label.count(p.strat_label)) label_order.push_back(p.strat_label);
    by_label[p.strat_label].push_back(p);
  }

  std::vector<int64_t> fold_slides(size_t(k), 0);
  std::map<std::string, int> assignment;
  for (const auto& lab : label_order) {
    std::vector<int64_t> fold_label_count(size_t(k), 0);
    for (const auto& p : by_label[lab]) {
      int best = 0;
      for (int f = 1; f < k; ++f) {
        if (fold_label_count[size_t(f)] < fold_label_count[size_t(best)] ||
            (fold_label_count[size_t(f)] == fold_label_count[size_t(best)] &&
             fold_slides[size_t(f)] < fold_slides[size_t(best)])) {
          best = f;
        }
      }
      assignment[p.id] = best;
      ++fold_label_count[size_t(best)];
      fold_slides[size_t(best)] += p.n_slides;
    }
  }

  // One SplitAssignment per fold: that fold is validation, the rest train.
  std::vector<SplitAssignment> folds(static_cast<size_t>(k));
  for (int f = 0; f < k; ++f) {
    for (const auto& [id, fold] : assignment) {
      folds[size_t(f)].patient_to_group[id] = fold == f ? 1 : 0;
    }
  }
  return folds;
}

// Patient-leakage audit over an arbitrary slide-level assignment: every
// patient's slides must share one group. Returns violating patient ids.
inline std::vector<std::string> patient_leakage_violations(
    const std::vector<SlideRecord>& records, const std::map<std::string, int>& slide_to_group) {
  std::map<std::string, std::set<int>> groups_by_patient;
  for (const auto& r : records) {
    auto it = slide_to_group.find(r.slide_id);
    if (it == slide_to_group.end()) {
      throw std::invalid_argument("leakage audit: slide '" + r.slide_id + "' has no assignment");
    }
    groups_by_patient[r.patient_id].insert(it->second);
  }
  std::vector<std::string> bad;
  for (const auto& [pid, groups] : groups_by_patient) {
    if (groups.size() > 1) bad.push_back(pid);
  }
  return bad;
}

inline void audit_patient_leakage(const std::vector<SlideRecord>& records,
                                  const std::map<std::string, int>& slide_to_group) {
  const auto bad = patient_leakage_violations(records, slide_to_group);
  if (!bad.empty()) {
    std::string msg = "leakage audit: patients span multiple splits:";
    for (const auto& id : bad) msg += " " + id;
    throw std::invalid_argument(msg);
  }
}

}  // namespace bright
