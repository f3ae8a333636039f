// Dataset manifest: one CSV row per slide with patient identity, image path,
// resolution, an optional dataset role, and free-form task label columns.
// Also the bag index (slide_id -> bag path) written by the embed stage.
#pragma once

#include <bright/csv.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

// Roles control data hygiene: slides used for pretraining must never appear
// in evaluation splits.
inline const std::vector<std::string>& known_roles() {
  static const std::vector<std::string> roles = {"pretrain", "downstream-train", "internal-val",
                                                 "external-val"};
  return roles;
}

struct SlideRecord {
  std::string patient_id;
  std::string slide_id;
  std::string image_path;
  std::string mask_path;  // optional ground-truth mask
  double mpp = 0.5;
  std::string role;  // empty or one of known_roles()
  std::map<std::string, std::string> labels;  // remaining columns by name
};

inline std::string label_of(const SlideRecord& rec, const std::string& column) {
  auto it = rec.labels.find(column);
  if (it == rec.labels.end()) {
    throw std::invalid_argument("manifest: slide " + rec.slide_id + " missing label column '" +
                                column + "'");
  }
  return it->second;
}

inline int int_label(const SlideRecord& rec, const std::string& column) {
  const std::string s = label_of(rec, column);
  try {
    size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw std::invalid_argument("manifest: slide " + rec.slide_id + " column '" + column +
                                "' is not an integer: '" + s + "'");
  }
}

inline double double_label(const SlideRecord& rec, const std::string& column) {
  const std::string s = label_of(rec, column);
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw std::invalid_argument("manifest: slide " + rec.slide_id + " column '" + column +
                                "' is not a number: '" + s + "'");
  }
}

// Fixed leading columns, then the label columns in the given order.
inline void write_manifest(const std::string& path, const std::vector<SlideRecord>& records,
                           const std::vector<std::string>& label_columns) {
  CsvTable t;
  t.header = {"patient_id", "slide_id", "image_path", "mask_path", "mpp", "role"};
  for (const auto& c : label_columns) t.header.push_back(c);
  for (const auto& r : records) {
    std::vector<std::string> row = {r.patient_id, r.slide_id,        r.image_path,
                                    r.mask_path,  std::to_string(r.mpp), r.role};
    for (const auto& c : label_columns) {
      auto it = r.labels.find(c);
      row.push_back(it == r.labels.end() ? "" : it->second);
    }
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

inline std::vector<SlideRecord> read_manifest(const std::string& path,
                                              std::vector<std::string>* label_columns = nullptr) {
  const CsvTable t = read_csv(path);
  const std::vector<std::string> fixed = {"patient_id", "slide_id", "image_path",
                                          "mask_path",  "mpp",      "role"};
  std::map<std::string, size_t> col;
  for (size_t i = 0; i < t.header.size(); ++i) col[t.header[i]] = i;
  for (const auto& c : {"patient_id", "slide_id", "image_path"}) {
    if (!col.count(c)) {
      throw std::invalid_argument(path + ": manifest missing required column '" + std::string(c) +
                                  "'");
    }
  }
  if (label_columns) {
    label_columns->clear();
    for (const auto& h : t.header) {
      if (std::find(fixed.begin(), fixed.end(), h) == fixed.end()) label_columns->push_back(h);
    }
  }
  std::vector<SlideRecord> out;
  std::set<std::string> seen_ids;
  for (size_t ri = 0; ri < t.rows.size(); ++ri) {
    const auto& row = t.rows[ri];
    SlideRecord r;
    r.patient_id = row[col.at("patient_id")];
    r.slide_id = row[col.at("slide_id")];
    r.image_path = row[col.at("image_path")];
    if (col.count("mask_path")) r.mask_path = row[col.at("mask_path")];
    if (col.count("mpp")) {
      const std::string& s = row[col.at("mpp")];
      if (!s.empty()) r.mpp = std::stod(s);
    }
    if (col.count("role")) r.role = row[col.at("role")];
    if (!r.role.empty() &&
        std::find(known_roles().begin(), known_roles().end(), r.role) == known_roles().end()) {
      throw std::invalid_argument(path + ": row " + std::to_string(ri + 2) + " has unknown role '" +
                                  r.role + "'");
    }
    if (r.patient_id.empty() || r.slide_id.empty()) {
      throw std::invalid_argument(path + ": row " + std::to_string(ri + 2) +
                                  " missing patient_id or slide_id");
    }
    if (!seen_ids.insert(r.slide_id).second) {
      throw std::invalid_argument(path + ": duplicate slide_id '" + r.slide_id + "'");
    }
    for (size_t i = 0; i < t.header.size(); ++i) {
      if (std::find(fixed.begin(), fixed.end(), t.header[i]) == fixed.end()) {
        r.labels[t.header[i]] = row[i];
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Slides that fed pretraining must not reappear under an evaluation role.
// Returns the offending slide ids (empty = clean).
inline std::vector<std::string> role_overlap_violations(const std::vector<SlideRecord>& records) {
  std::set<std::string> pretrain_ids;
  for (const auto& r : records) {
    if (r.role == "pretrain") pretrain_ids.insert(r.slide_id);
  }
  std::vector<std::string> bad;
  for (const auto& r : records) {
    if ((r.role == "internal-val" || r.role == "external-val" || r.role == "downstream-train") &&
        pretrain_ids.count(r.slide_id)) {
      bad.push_back(r.slide_id);
    }
  }
  return bad;
}

inline void audit_roles(const std::vector<SlideRecord>& records) {
  const auto bad = role_overlap_violations(records);
  if (!bad.empty()) {
    std::string msg = "role audit: slides appear in both pretrain and evaluation roles:";
    for (const auto& id : bad) msg += " " + id;
    throw std::invalid_argument(msg);
  }
}

// Bag index: slide_id -> bag path, written by the embed stage.
inline void write_bag_index(const std::string& path,
                            const std::vector<std::pair<std::string, std::string>>& entries) {
  CsvTable t;
  t.header = {"slide_id", "bag_path"};
  for (const auto& [id, p] : entries) t.rows.push_back({id, p});
  write_csv(path, t);
}

inline std::map<std::string, std::string> read_bag_index(const std::string& path) {
  const CsvTable t = read_csv(path);
  if (t.header.size() < 2 || t.header[0] != "slide_id" || t.header[1] != "bag_path") {
    throw std::invalid_argument(path + ": not a bag index (expected slide_id, bag_path)");
  }
  std::map<std::string, std::string> out;
  for (const auto& row : t.rows) {
    if (!out.emplace(row[0], row[1]).second) {
      throw std::invalid_argument(path + ": duplicate slide_id '" + row[0] + "'");
    }
  }
  return out;
}

}  // namespace bright
