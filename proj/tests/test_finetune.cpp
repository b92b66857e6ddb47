#include <doctest.h>

#include <cmath>

#include "omat/detector.hpp"
#include "omat/error.hpp"
#include "omat/finetune.hpp"
#include "omat/rng.hpp"

using namespace omat;
using namespace omat::finetune;
using omat::detector::Arch;
using omat::detector::Detector;
using omat::detector::LabeledSet;

namespace {

LabeledSet constant_set(std::size_t n, std::size_t w, double center, double label,
                        const std::string& prov, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> rows;
    rows.reserve(n * w);
    for (std::size_t i = 0; i < n * w; ++i)
        rows.push_back(std::clamp(center + 0.05 * rng.normal(), -1.0, 1.0));
    LabeledSet s;
    s.images = Tensor({n, w}, std::move(rows));
    s.labels.assign(n, label);
    s.provenance.assign(n, prov);
    return s;
}

LabeledSet adv_like_set(std::size_t n, std::size_t w, std::uint64_t seed) {
    LabeledSet s = constant_set(n, w, -0.3, 1.0, "adv", seed); // fakes near the real cluster
    return s;
}

Detector toy_base(std::uint64_t seed) {
    Rng rng(seed);
    return Detector::init(Arch::FrozenHead, 16, {24}, 12, rng);
}

bool same_params(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].data != b[i].data) return false;
    return true;
}

} // namespace

TEST_CASE("lambda_adv schedule values and shape") {
    CHECK(lambda_adv(1) == 1.2);
    CHECK(lambda_adv(5) == 2.0);
    CHECK(lambda_adv(10) == 3.0);
    CHECK(lambda_adv(20) == 3.0);
    CHECK_THROWS_AS(lambda_adv(0), DomainError);

    double prev = 0.0;
    for (std::size_t e = 1; e <= 30; ++e) {
        const double l = lambda_adv(e);
        CHECK(l >= 1.2);
        CHECK(l <= 3.0);
        CHECK(l >= prev);
        if (e >= 10) CHECK(l == 3.0);
        prev = l;
    }

    CHECK(lambda_adv(3, 0.5, 0.1, 2.0) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK_THROWS_AS(lambda_adv(3, 2.0, 0.1, 1.0), DomainError); // cap below base
}

TEST_CASE("checkpoint_score weighting and domain") {
    CHECK(checkpoint_score(1.0, 1.0) == 1.0);
    CHECK(checkpoint_score(0.9, 0.5) == doctest::Approx(0.74).epsilon(1e-15));
    CHECK(checkpoint_score(0.0, 1.0) == doctest::Approx(0.4).epsilon(1e-15));

    // Monotone in both arguments.
    CHECK(checkpoint_score(0.8, 0.5) > checkpoint_score(0.7, 0.5));
    CHECK(checkpoint_score(0.8, 0.6) > checkpoint_score(0.8, 0.5));

    CHECK_THROWS_AS(checkpoint_score(-0.1, 0.5), DomainError);
    CHECK_THROWS_AS(checkpoint_score(0.5, 1.1), DomainError);
    CHECK_THROWS_AS(checkpoint_score(0.5, 0.5, 0.7, 0.4), DomainError);

    CHECK(std::string(strategy_name(Strategy::Lora)) == "lora");
    CHECK(strategy_from_name("head_only") == Strategy::HeadOnly);
    CHECK_THROWS_AS(strategy_from_name("adapters"), DomainError);
}

TEST_CASE("apply_lora: identity at init, merge equivalence, counts") {
    Detector base = toy_base(50);
    std::vector<std::size_t> targets{0, 1};
    AdaptedDetector ad = apply_lora(base, targets, 4, 0.1, 99);
    CHECK(ad.adapters.size() == 2);
    CHECK(ad.adapters[0].alpha == 8.0);
    for (double v : ad.adapters[0].B.data) CHECK(v == 0.0);

    Rng rng(123);
    Tensor x({1, 16}, rng.normal_vec(16));
    for (auto& v : x.data) v = std::clamp(v * 0.4, -1.0, 1.0);

    // B = 0: adapters are invisible, bit-for-bit.
    CHECK(ad.logits_eval(x).data == base.logits(x).data);
    CHECK(ad.logits_branched(x).data == base.logits(x).data);

    // Load the adapters with real values; the branched forward and the merged
    // forward are the same function up to float reassociation.
    for (auto& a : ad.adapters) {
        Rng r2(7 + a.layer);
        for (auto& v : a.A.data) v = 0.3 * r2.normal();
        for (auto& v : a.B.data) v = 0.3 * r2.normal();
    }
    const double from_branch = ad.logits_branched(x).data[0];
    const double from_merge = ad.merged().logits(x).data[0];
    CHECK(std::abs(from_branch - from_merge) <= 1e-9);
    CHECK_FALSE(from_branch == base.logits(x).data[0]); // adapters now active

    // r*(in+out) per target plus the head: 4*(16+24) + 4*(24+12) + (12+1).
    CHECK(lora_trainable_count(ad) == 317);

    CHECK_THROWS_AS(apply_lora(base, targets, 12, 0.1, 1), DomainError); // rank >= min dim
    CHECK_THROWS_AS(apply_lora(base, std::vector<std::size_t>{5}, 2, 0.1, 1), DomainError);
    CHECK_THROWS_AS(apply_lora(base, std::vector<std::size_t>{0, 0}, 2, 0.1, 1), DomainError);
    CHECK_THROWS_AS(apply_lora(base, std::vector<std::size_t>{}, 2, 0.1, 1), DomainError);
    CHECK_THROWS_AS(apply_lora(base, targets, 0, 0.1, 1), DomainError);
}

TEST_CASE("omat_train: history, checkpoint choice, frozen parts") {
    LabeledSet real = constant_set(30, 16, -0.5, 0.0, "real", 600);
    LabeledSet fake = constant_set(30, 16, 0.5, 1.0, "fake:toy", 601);
    LabeledSet std_set = detector::merge_sets(real, fake);
    LabeledSet x_adv = adv_like_set(8, 16, 602);
    Detector base = toy_base(60);

    OmatConfig cfg;
    cfg.strategy = Strategy::HeadOnly;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.learning_rate = 5e-3;
    cfg.seed = 11;

    OmatResult r = omat_train(base, std_set, x_adv, cfg);
    CHECK(r.history.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        const OmatEpoch& e = r.history[i];
        CHECK(e.epoch == i + 1);
        CHECK(e.lambda == lambda_adv(i + 1));
        CHECK(e.score == checkpoint_score(e.val_acc, e.adv_acc));
        CHECK(e.val_acc >= 0.0);
        CHECK(e.val_acc <= 1.0);
    }
    // best_epoch is the first argmax of the per-epoch score.
    std::size_t want = 0;
    for (std::size_t i = 0; i < 3; ++i)
        if (r.history[i].score > (want == 0 ? -1.0 : r.history[want - 1].score)) want = i + 1;
    CHECK(r.best_epoch == want);

    // head_only leaves the backbone untouched, bit for bit.
    CHECK(same_params(r.raw.backbone.params, base.backbone.params));
    CHECK(same_params(r.det.backbone.params, r.raw.backbone.params));
    CHECK_FALSE(same_params(r.det.head.params, base.head.params));

    // Reproducibility.
    OmatResult r2 = omat_train(base, std_set, x_adv, cfg);
    CHECK(same_params(r2.det.head.params, r.det.head.params));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(r2.history[i].train_loss == r.history[i].train_loss);
        CHECK(r2.history[i].score == r.history[i].score);
    }

    // Full strategy trains the backbone too.
    cfg.strategy = Strategy::Full;
    OmatResult rf = omat_train(base, std_set, x_adv, cfg);
    CHECK_FALSE(same_params(rf.det.backbone.params, base.backbone.params));

    // Single epoch: one checkpoint, returned regardless of score.
    cfg.epochs = 1;
    OmatResult r1 = omat_train(base, std_set, x_adv, cfg);
    CHECK(r1.history.size() == 1);
    CHECK(r1.best_epoch == 1);

    OmatConfig bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(omat_train(base, std_set, x_adv, bad), DomainError);
    bad = cfg;
    bad.w_val = 0.9; // weights no longer sum to 1
    CHECK_THROWS_AS(omat_train(base, std_set, x_adv, bad), DomainError);

    LabeledSet wrong = constant_set(4, 16, 0.2, 1.0, "fake:g", 603);
    CHECK_THROWS_AS(omat_train(base, std_set, wrong, cfg), DomainError);
}

TEST_CASE("omat_train: empty x_adv degenerates to standard training") {
    LabeledSet real = constant_set(25, 16, -0.5, 0.0, "real", 610);
    LabeledSet fake = constant_set(25, 16, 0.5, 1.0, "fake:toy", 611);
    LabeledSet std_set = detector::merge_sets(real, fake);
    Detector base = toy_base(61);

    OmatConfig cfg;
    cfg.strategy = Strategy::HeadOnly;
    cfg.epochs = 4;
    cfg.batch_size = 16;
    cfg.learning_rate = 5e-3;
    cfg.seed = 13;

    OmatResult r = omat_train(base, std_set, detector::LabeledSet{}, cfg);
    for (const auto& e : r.history) CHECK(e.adv_acc == 1.0); // vacuous
    CHECK(detector::accuracy(r.det, std_set) >= detector::accuracy(base, std_set) - 0.05);
}

TEST_CASE("omat_train lora: frozen base, live adapters, reproducible dropout") {
    LabeledSet real = constant_set(24, 16, -0.5, 0.0, "real", 620);
    LabeledSet fake = constant_set(24, 16, 0.5, 1.0, "fake:toy", 621);
    LabeledSet std_set = detector::merge_sets(real, fake);
    LabeledSet x_adv = adv_like_set(6, 16, 622);
    Detector base = toy_base(62);

    OmatConfig cfg;
    cfg.strategy = Strategy::Lora;
    cfg.lora_rank = 2;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 17;

    OmatResult r = omat_train(base, std_set, x_adv, cfg);
    CHECK(r.adapters.size() == base.backbone.n_layers());
    // Base weight matrices stay bit-identical; the merged model moves.
    CHECK(same_params(r.raw.backbone.params, base.backbone.params));
    bool adapters_live = false;
    for (const auto& a : r.adapters)
        for (double v : a.B.data) adapters_live |= v != 0.0;
    CHECK(adapters_live);
    CHECK_FALSE(same_params(r.det.backbone.params, base.backbone.params));

    OmatResult r2 = omat_train(base, std_set, x_adv, cfg);
    CHECK(same_params(r2.det.backbone.params, r.det.backbone.params));
    CHECK(same_params(r2.det.head.params, r.det.head.params));
    for (std::size_t i = 0; i < r.history.size(); ++i)
        CHECK(r2.history[i].train_loss == r.history[i].train_loss);
}

TEST_CASE("strategy_sweep tabulates accuracies and exact deltas") {
    LabeledSet real = constant_set(20, 16, -0.5, 0.0, "real", 630);
    LabeledSet fake = constant_set(20, 16, 0.5, 1.0, "fake:toy", 631);
    LabeledSet std_set = detector::merge_sets(real, fake);
    LabeledSet x_adv = adv_like_set(5, 16, 632);
    Detector base = toy_base(63);

    std::map<std::string, LabeledSet> eval_sets{
        {"seen", detector::merge_sets(real, fake)},
        {"shifted", detector::merge_sets(constant_set(10, 16, -0.4, 0.0, "real", 633),
                                         constant_set(10, 16, 0.6, 1.0, "fake:g2", 634))}};

    OmatConfig head;
    head.strategy = Strategy::HeadOnly;
    head.epochs = 1;
    head.batch_size = 16;
    head.seed = 19;
    OmatConfig lora = head;
    lora.strategy = Strategy::Lora;
    lora.lora_rank = 2;

    std::vector<OmatConfig> strategies{head, lora};
    SweepReport rep = strategy_sweep(base, std_set, x_adv, strategies, eval_sets);

    REQUIRE(rep.rows.size() == 3);
    CHECK(rep.rows[0].name == "base");
    CHECK(rep.rows[1].name == "head_only");
    CHECK(rep.rows[2].name == "lora(2)");
    for (const auto& row : rep.rows) {
        CHECK(row.acc.size() == 2);
        double s = 0.0;
        for (const auto& [k, v] : row.acc) s += v;
        CHECK(row.avg == doctest::Approx(s / 2.0).epsilon(1e-15));
    }
    for (std::size_t i = 1; i < 3; ++i)
        for (const auto& [k, v] : rep.rows[i].acc) {
            CHECK(rep.rows[i].delta.at(k) == v - rep.rows[0].acc.at(k));
        }

    // One-row sweep wraps a plain omat_train of the same config.
    OmatResult direct = omat_train(base, std_set, x_adv, head);
    detector::EvalReport er = detector::evaluate(direct.det, eval_sets);
    SweepReport one = strategy_sweep(base, std_set, x_adv,
                                     std::vector<OmatConfig>{head}, eval_sets);
    CHECK(one.rows[1].acc.at("seen") == er.per_set.at("seen").acc);
    CHECK(one.rows[1].avg == er.avg_acc);

    CHECK_THROWS_AS(strategy_sweep(base, std_set, x_adv, std::vector<OmatConfig>{}, eval_sets),
                    DomainError);
    CHECK_THROWS_AS(strategy_sweep(base, std_set, x_adv, strategies,
                                   std::map<std::string, LabeledSet>{}),
                    DomainError);
}
