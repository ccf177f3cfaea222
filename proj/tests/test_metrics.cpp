#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "adv2/metrics.hpp"
#include "test_support.hpp"

using namespace adv2;
using namespace adv2::metrics;

TEST_CASE("asr_mc on trivial batches") {
    attack::AttackOutcome win;
    win.success = true;
    win.confidence = 0.9;
    attack::AttackOutcome lose;
    lose.success = false;
    lose.confidence = 0.1;

    BatchStats all = asr_mc({win, win, win});
    CHECK(all.asr == 1.0);
    REQUIRE(all.mean_mc.has_value());
    CHECK(std::fabs(*all.mean_mc - 0.9) < 1e-12);

    BatchStats none = asr_mc({lose, lose});
    CHECK(none.asr == 0.0);
    CHECK_FALSE(none.mean_mc.has_value());

    attack::AttackOutcome half = win;
    half.confidence = 0.5;
    BatchStats mix = asr_mc({win, half, lose});
    CHECK(std::fabs(mix.asr - 2.0 / 3) < 1e-12);
    CHECK(std::fabs(*mix.mean_mc - 0.7) < 1e-12);
    CHECK_THROWS(asr_mc({}));
}

TEST_CASE("lp distances: trivial and hand-counted values") {
    Tensor a = Tensor::full({2, 2}, 1.0);
    Tensor b({2, 2});
    CHECK(lp_distance(a, a, 1) == 0.0);
    CHECK(lp_distance(a, a, 2) == 0.0);
    CHECK(lp_distance(a, b, 1) == 1.0);
    CHECK(lp_distance(a, b, 2) == 1.0);

    Tensor p({2, 2}, {0.0, 1.0, 0.0, 1.0});
    Tensor q({2, 2}, {1.0, 1.0, 0.0, 0.0});
    CHECK(lp_distance(p, q, 1) == 0.5);

    Rng rng(4);
    for (int t = 0; t < 20; ++t) {
        Tensor u = testsup::random_image({5, 5}, rng);
        Tensor v = testsup::random_image({5, 5}, rng);
        CHECK(lp_distance(u, v, 1) == lp_distance(v, u, 1));
        CHECK(lp_distance(u, v, 2) == lp_distance(v, u, 2));
        CHECK(lp_distance(u, v, 1) >= 0.0);
        CHECK(lp_distance(u, v, 1) <= 1.0);
        CHECK(lp_distance(u, v, 2) <= 1.0);
    }
}

TEST_CASE("iou: trivial, enumerated, and set-equality cases") {
    Tensor m({2, 2}, {0.9, 0.8, 0.1, 0.0});
    CHECK(iou_score(m, m, 0.5) == 1.0);

    Tensor disj({2, 2}, {1.0, 0.9, 0.0, 0.0});
    Tensor disj2({2, 2}, {0.0, 0.0, 0.9, 1.0});
    CHECK(iou_score(disj, disj2, 0.5) == 0.0);

    // 4-pixel maps, two kept each, one shared top pixel -> 1/3
    Tensor x({2, 2}, {0.9, 0.8, 0.1, 0.0});
    Tensor y({2, 2}, {0.9, 0.0, 0.8, 0.1});
    CHECK(std::fabs(iou_score(x, y, 0.5) - 1.0 / 3) < 1e-12);

    // kept sets equal although values differ
    Tensor v1({2, 2}, {0.9, 0.8, 0.1, 0.0});
    Tensor v2({2, 2}, {0.5, 0.45, 0.2, 0.1});
    CHECK(iou_score(v1, v2, 0.5) == 1.0);

    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        Tensor u = testsup::random_image({6, 6}, rng);
        Tensor w = testsup::random_image({6, 6}, rng);
        CHECK(iou_score(u, w) == iou_score(w, u));
    }
    CHECK_THROWS(top_q_set(m, 0.0));
    CHECK_THROWS(top_q_set(m, 1.0));
}

TEST_CASE("top_q tie-break is deterministic by pixel order") {
    Tensor m = Tensor::full({3, 3}, 0.5);
    auto kept = top_q_set(m, 0.3);  // 9 * 0.3 -> 3 pixels
    REQUIRE(kept.size() == 3);
    CHECK(kept[0] == 0);
    CHECK(kept[1] == 1);
    CHECK(kept[2] == 2);
}

TEST_CASE("random patch targets: full-image degenerate, variety, area bounds") {
    Tensor full = random_patch_target(10, 10, 1, 0.995, 1.0);
    for (std::size_t i = 0; i < full.size(); ++i) CHECK(full[i] == 1.0);

    Tensor a = random_patch_target(28, 28, 1);
    Tensor b = random_patch_target(28, 28, 2);
    CHECK(tensor_hash(a) != tensor_hash(b));

    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Tensor m = random_patch_target(28, 28, seed);
        double frac = m.sum() / m.size();
        CHECK(frac >= 0.05);
        CHECK(frac <= 0.40);
        for (std::size_t i = 0; i < m.size(); ++i)
            CHECK((m[i] == 0.0 || m[i] == 1.0));
    }
}

TEST_CASE("random class targets never use the target class as donor") {
    const nn::Classifier& f = testsup::tiny_classifier();
    auto& ds = testsup::gray_data();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        RandomClassTarget t = random_class_target(f, ds.images, interp::InterpreterId::grad, 4, seed);
        CHECK(t.donor_class != 4);
        CHECK(t.map.min() >= 0.0);
        CHECK(t.map.max() <= 1.0);
        CHECK(t.map.dim(0) == 28);
    }
    std::vector<nn::Image> single;
    single.push_back(ds.images[0]);
    single[0].label = 4;
    CHECK_THROWS(random_class_target(f, single, interp::InterpreterId::grad, 4, 1));
}

TEST_CASE("transfer matrix: benign self-transfer is zero") {
    Rng rng(6);
    std::vector<std::vector<Tensor>> benign(2);
    for (int g = 0; g < 2; ++g)
        for (int i = 0; i < 3; ++i) benign[static_cast<std::size_t>(g)].push_back(testsup::random_image({4, 4}, rng));
    std::vector<std::vector<std::vector<Tensor>>> adv(2, std::vector<std::vector<Tensor>>(2));
    for (int s = 0; s < 2; ++s)
        for (int t = 0; t < 2; ++t) adv[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] = benign[static_cast<std::size_t>(t)];
    Tensor M = transfer_matrix(adv, benign);
    for (std::size_t i = 0; i < M.size(); ++i) CHECK(M[i] == 0.0);

    // perturbing the off-diagonal entries moves only those means
    adv[0][1][0] = Tensor::full({4, 4}, 1.0);
    Tensor M2 = transfer_matrix(adv, benign);
    CHECK(M2[0] == 0.0);
    CHECK(M2[1] > 0.0);
}

TEST_CASE("metric records serialize with the documented header") {
    auto path = std::filesystem::temp_directory_path() / "adv2_metrics.csv";
    write_metrics_csv(path.string(), {{"7", "adv2_grad", "grad", true, 0.97, 0.03, 0.05, 0.8, "bit2"}});
    std::ifstream is(path);
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    CHECK(header == "image_id,attack_id,interpreter,asr_flag,mc,l1,l2,iou,detect_flags");
    CHECK(row.rfind("7,adv2_grad,grad,1,0.97", 0) == 0);
}
