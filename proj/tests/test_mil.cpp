#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "bright/mil.hpp"

using namespace bright;

namespace {

EmbeddingBag make_bag(Rng& rng, const std::string& id, int n_tiles, int dim, int label,
                      double signal = 3.0, double frac = 0.4) {
  EmbeddingBag bag;
  bag.slide_id = id;
  bag.patient_id = id;
  bag.tile_size = 32;
  bag.mpp = 1.0;
  bag.embeddings.resize(n_tiles, dim);
  for (int t = 0; t < n_tiles; ++t) {
    bag.coords.emplace_back(uint32_t(32 * t), 0u);
    for (int c = 0; c < dim; ++c) bag.embeddings(t, c) = float(rng.normal() * 0.5);
    // Positive bags carry a shifted subset of tiles; negatives stay at baseline.
    if (label == 1 && t < int(std::ceil(frac * n_tiles))) {
      bag.embeddings(t, 0) += float(signal);
      bag.embeddings(t, 1) -= float(signal);
    }
  }
  return bag;
}

struct Cohort {
  std::vector<EmbeddingBag> storage;
  std::vector<const EmbeddingBag*> bags;
  std::vector<int> labels;
};

Cohort separable_cohort(uint64_t seed, int n_per_class, int dim = 8) {
  Cohort c;
  Rng rng(seed);
  for (int i = 0; i < 2 * n_per_class; ++i) {
    const int y = i % 2;
    c.storage.push_back(make_bag(rng, "b" + std::to_string(i), 6 + int(rng.uniform_int(6)), dim, y));
    c.labels.push_back(y);
  }
  for (const auto& b : c.storage) c.bags.push_back(&b);
  return c;
}

MilHeadParams random_head(uint64_t seed, int dim, int n_out, const MilConfig& cfg) {
  Rng rng(seed);
  return init_mil_head(dim, n_out, cfg, rng);
}

}  // namespace

TEST_CASE("attention weights form a distribution") {
  MilConfig cfg;
  cfg.hidden = 16;
  const MilHeadParams p = random_head(1, 8, 2, cfg);
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const EmbeddingBag bag = make_bag(rng, "s", 1 + int(rng.uniform_int(20)), 8, trial % 2);
    const Eigen::VectorXf a = gated_attention(bag.embeddings, p);
    CHECK(a.size() == bag.n_tiles());
    CHECK(a.minCoeff() >= 0.f);
    CHECK(std::abs(a.sum() - 1.f) < 1e-6f);
  }
  CHECK_THROWS_AS(gated_attention(Eigen::MatrixXf(0, 8), p), std::invalid_argument);
  CHECK_THROWS_WITH_AS(gated_attention(Eigen::MatrixXf::Zero(2, 5), p),
                       doctest::Contains("does not match"), std::invalid_argument);
}

TEST_CASE("predictions are invariant to tile order and duplication") {
  MilConfig cfg;
  cfg.hidden = 16;
  const MilHeadParams pc = random_head(3, 8, 3, cfg);
  const MilHeadParams pr = random_head(4, 8, 1, cfg);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const EmbeddingBag bag = make_bag(rng, "s", 3 + int(rng.uniform_int(10)), 8, trial % 2);
    const SlidePrediction base_c = mil_classify(bag, pc);
    const SlidePrediction base_r = mil_risk(bag, pr);

    // Reversal as a concrete permutation.
    EmbeddingBag rev = bag;
    rev.embeddings = bag.embeddings.colwise().reverse().eval();
    std::reverse(rev.coords.begin(), rev.coords.end());
    const SlidePrediction perm_c = mil_classify(rev, pc);
    for (size_t k = 0; k < base_c.probs.size(); ++k) {
      CHECK(std::abs(perm_c.probs[k] - base_c.probs[k]) <= 1e-6);
    }
    CHECK(std::abs(mil_risk(rev, pr).risk - base_r.risk) <= 1e-6);
    // Attention follows the permutation.
    const Eigen::VectorXf ra = perm_c.attention.reverse();
    CHECK((ra - base_c.attention).cwiseAbs().maxCoeff() <= 1e-6f);

    // Duplicating every tile leaves the pooled outputs unchanged and halves
    // each attention weight.
    EmbeddingBag dup = bag;
    dup.embeddings.resize(2 * bag.n_tiles(), bag.fused_dim());
    dup.embeddings.topRows(bag.n_tiles()) = bag.embeddings;
    dup.embeddings.bottomRows(bag.n_tiles()) = bag.embeddings;
    dup.coords.insert(dup.coords.end(), bag.coords.begin(), bag.coords.end());
    const SlidePrediction dup_c = mil_classify(dup, pc);
    for (size_t k = 0; k < base_c.probs.size(); ++k) {
      CHECK(std::abs(dup_c.probs[k] - base_c.probs[k]) <= 1e-6);
    }
    CHECK(std::abs(mil_risk(dup, pr).risk - base_r.risk) <= 1e-6);
    CHECK((dup_c.attention.head(bag.n_tiles()) * 2.f - base_c.attention)
              .cwiseAbs()
              .maxCoeff() <= 1e-6f);
  }
}

TEST_CASE("classifier separates bag-level signal") {
  Cohort train = separable_cohort(10, 12);
  Cohort val = separable_cohort(11, 6);
  MilConfig cfg;
  cfg.hidden = 32;
  cfg.epochs = 30;
  MilTrainLog log;
  const MilHeadParams head =
      train_mil_classifier(train.bags, train.labels, val.bags, val.labels, cfg, 77, &log);

  std::vector<double> scores;
  for (const auto* b : val.bags) scores.push_back(mil_classify(*b, head).probs[1]);
  CHECK(auroc_or_nan(scores, val.labels) >= 0.95);

  CHECK(log.epoch_losses.size() == size_t(cfg.epochs));
  CHECK(log.val_scores.size() == size_t(cfg.epochs));
  CHECK(log.best_epoch >= 0);
  CHECK(log.best_epoch < cfg.epochs);
  double best_seen = -1;
  for (double s : log.val_scores) {
    if (!std::isnan(s)) best_seen = std::max(best_seen, s);
  }
  CHECK(log.best_score == doctest::Approx(best_seen));
  for (double l : log.epoch_losses) CHECK(std::isfinite(l));

  // Same seed reproduces the run; different seed moves the parameters.
  MilTrainLog log2;
  const MilHeadParams again =
      train_mil_classifier(train.bags, train.labels, val.bags, val.labels, cfg, 77, &log2);
  CHECK(again.v == head.v);
  CHECK(log2.epoch_losses == log.epoch_losses);
  const MilHeadParams other =
      train_mil_classifier(train.bags, train.labels, val.bags, val.labels, cfg, 78);
  CHECK(other.v != head.v);
}

TEST_CASE("attention concentrates on signal tiles after training") {
  Cohort train = separable_cohort(20, 12);
  Cohort val = separable_cohort(21, 6);
  MilConfig cfg;
  cfg.hidden = 32;
  cfg.epochs = 30;
  const MilHeadParams head =
      train_mil_classifier(train.bags, train.labels, val.bags, val.labels, cfg, 5);
  // In positive bags the shifted tiles come first; their mean attention should
  // dominate the baseline tiles'.
  int wins = 0, total = 0;
  for (size_t i = 0; i < val.bags.size(); ++i) {
    if (val.labels[i] != 1) continue;
    const Eigen::VectorXf a = mil_classify(*val.bags[i], head).attention;
    const int k = int(std::ceil(0.4 * double(a.size())));
    const double top = a.head(k).mean();
    const double rest = a.tail(a.size() - k).mean();
    wins += top > rest;
    ++total;
  }
  CHECK(total >= 3);
  CHECK(wins >= total - 1);
}

TEST_CASE("instance loss variant still trains") {
  Cohort train = separable_cohort(30, 10);
  Cohort val = separable_cohort(31, 5);
  MilConfig cfg;
  cfg.hidden = 16;
  cfg.epochs = 15;
  cfg.instance_loss_weight = 0.3;
  cfg.instance_topk = 2;
  MilTrainLog log;
  const MilHeadParams head =
      train_mil_classifier(train.bags, train.labels, val.bags, val.labels, cfg, 9, &log);
  std::vector<double> scores;
  for (const auto* b : val.bags) scores.push_back(mil_classify(*b, head).probs[1]);
  CHECK(auroc_or_nan(scores, val.labels) >= 0.9);
}

TEST_CASE("survival head orders risk by bag signal") {
  Rng rng(40);
  std::vector<EmbeddingBag> storage;
  std::vector<double> times;
  std::vector<int> events;
  // Stronger bag signal (label 1) means shorter survival.
  for (int i = 0; i < 30; ++i) {
    const int y = i % 2;
    storage.push_back(make_bag(rng, "t" + std::to_string(i), 8, 8, y));
    times.push_back(y == 1 ? 1.0 + 0.1 * i : 10.0 + 0.1 * i);
    events.push_back(1);
  }
  std::vector<const EmbeddingBag*> train_bags;
  for (const auto& b : storage) train_bags.push_back(&b);

  std::vector<EmbeddingBag> vstore;
  std::vector<double> vtimes;
  std::vector<int> vevents;
  for (int i = 0; i < 10; ++i) {
    const int y = i % 2;
    vstore.push_back(make_bag(rng, "v" + std::to_string(i), 8, 8, y));
    vtimes.push_back(y == 1 ? 2.0 + 0.1 * i : 12.0 + 0.1 * i);
    vevents.push_back(1);
  }
  std::vector<const EmbeddingBag*> val_bags;
  for (const auto& b : vstore) val_bags.push_back(&b);

  MilConfig cfg;
  cfg.hidden = 16;
  cfg.epochs = 150;
  cfg.lr = 1e-2;
  MilTrainLog log;
  const MilHeadParams head = train_mil_survival(train_bags, times, events, val_bags, vtimes,
                                                vevents, cfg, 13, &log);
  std::vector<double> risks;
  for (const auto* b : val_bags) risks.push_back(mil_risk(*b, head).risk);
  // Within a class the bags are exchangeable, so those pairs sit at chance;
  // the learnable part is the between-class ordering.
  int good = 0, pairs = 0;
  for (size_t i = 0; i < risks.size(); ++i) {
    for (size_t j = 0; j < risks.size(); ++j) {
      if (vtimes[i] < vtimes[j] - 5.0) {  // short-time (high-signal) vs long-time bag
        good += risks[i] > risks[j];
        ++pairs;
      }
    }
  }
  CHECK(pairs == 25);
  CHECK(good >= 23);
  CHECK(concordance_or_nan(vtimes, vevents, risks) >= 0.75);
  CHECK(!log.no_event_warning);
  CHECK(log.best_epoch >= 0);
  for (double l : log.epoch_losses) CHECK(std::isfinite(l));

  // All-censored training data cannot be optimized; the head flags it.
  std::vector<int> censored(events.size(), 0);
  MilTrainLog warn_log;
  train_mil_survival(train_bags, times, censored, val_bags, vtimes, vevents, cfg, 13, &warn_log);
  CHECK(warn_log.no_event_warning);
}

TEST_CASE("head parameters round-trip through named arrays") {
  MilConfig cfg;
  cfg.hidden = 12;
  const MilHeadParams p = random_head(50, 20, 4, cfg);
  const MilHeadParams q = mil_from_arrays(mil_to_arrays(p));
  CHECK(q.v == p.v);
  CHECK(q.u == p.u);
  CHECK(q.w == p.w);
  CHECK(q.out_w == p.out_w);
  CHECK(q.out_b == p.out_b);
  CHECK(q.inst_w == p.inst_w);
  CHECK(q.inst_b == p.inst_b);
}

TEST_CASE("training input validation") {
  Cohort c = separable_cohort(60, 3);
  MilConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_mil_classifier({}, {}, c.bags, c.labels, cfg, 1), std::invalid_argument);
  CHECK_THROWS_AS(train_mil_classifier(c.bags, c.labels, {}, {}, cfg, 1), std::invalid_argument);
  std::vector<int> bad = c.labels;
  bad[0] = 7;
  CHECK_THROWS_AS(train_mil_classifier(c.bags, bad, c.bags, c.labels, cfg, 1),
                  std::invalid_argument);
  std::vector<int> mono(c.labels.size(), 0);
  CHECK_THROWS_WITH_AS(train_mil_classifier(c.bags, mono, c.bags, c.labels, cfg, 1),
                       doctest::Contains("single class"), std::invalid_argument);
  MilConfig zero = cfg;
  zero.hidden = 0;
  CHECK_THROWS_AS(train_mil_classifier(c.bags, c.labels, c.bags, c.labels, zero, 1),
                  std::invalid_argument);
  MilHeadParams multi = random_head(1, 8, 3, cfg);
  Rng rng(2);
  const EmbeddingBag bag = make_bag(rng, "s", 4, 8, 0);
  CHECK_THROWS_WITH_AS(mil_risk(bag, multi), doctest::Contains("expected 1"),
                       std::invalid_argument);
}
