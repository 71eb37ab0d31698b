#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "vitprune/evalkit.hpp"

using namespace vitprune;

namespace {

ViTConfig deit_s_geometry() {
    ViTConfig cfg;
    cfg.image_size = 224;
    cfg.patch_size = 16;
    cfg.channels = 3;
    cfg.embed_dim = 384;
    cfg.depth = 12;
    cfg.num_heads = 6;
    cfg.ffn_mult = 4;
    cfg.num_classes = 1000;
    cfg.prune_after = {3, 6, 9};
    return cfg;
}

// Independent counting oracle: per-block MACs accumulated term by term.
double counting_oracle_gflops(const ViTConfig& cfg, const std::vector<double>& tokens) {
    double total = 0;
    const double d = cfg.embed_dim;
    for (double n : tokens) {
        total += n * d * d;                    // q
        total += n * d * d;                    // k
        total += n * d * d;                    // v
        total += n * n * d;                    // scores
        total += n * n * d;                    // probs * V
        total += n * d * d;                    // output projection
        total += n * d * (cfg.ffn_mult * d);   // FFN expand
        total += n * (cfg.ffn_mult * d) * d;   // FFN contract
    }
    total += cfg.num_patches() * (cfg.channels * cfg.patch_size * cfg.patch_size) *
             static_cast<double>(cfg.embed_dim);
    total += static_cast<double>(cfg.embed_dim) * cfg.num_classes;
    return total / 1e9;
}

}  // namespace

TEST_CASE("flops_estimate: unpruned DeiT-S geometry lands near 4.6 GFLOPs") {
    ViTConfig cfg = deit_s_geometry();
    std::vector<double> tokens(12, 197.0);
    const double got = flops_estimate(cfg, tokens);
    CHECK(got == doctest::Approx(4.6).epsilon(0.02));
    CHECK(got == doctest::Approx(counting_oracle_gflops(cfg, tokens)).epsilon(1e-12));
}

TEST_CASE("flops_estimate: halving tokens after the first pruning layer strictly decreases") {
    ViTConfig cfg = deit_s_geometry();
    std::vector<double> full(12, 197.0);
    std::vector<double> halved = full;
    for (size_t b = 3; b < 12; ++b) {
        halved[b] = 99.0;
    }
    CHECK(flops_estimate(cfg, halved) < flops_estimate(cfg, full));

    // strictly increasing in every per-block count
    for (size_t b = 0; b < 12; ++b) {
        std::vector<double> bumped = halved;
        bumped[b] += 1.0;
        CHECK(flops_estimate(cfg, bumped) > flops_estimate(cfg, halved));
    }
}

TEST_CASE("flops_estimate: zero blocks leaves patch embedding plus head") {
    ViTConfig cfg = deit_s_geometry();
    cfg.depth = 0;
    cfg.prune_after.clear();
    const double got = flops_estimate(cfg, {});
    const double want = (196.0 * 3 * 16 * 16 * 384 + 384.0 * 1000) / 1e9;
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("per_block_token_counts: counts stay constant between pruning layers") {
    ViTConfig cfg;  // depth 4, prune_after {2,3}, 17 tokens
    auto counts = per_block_token_counts(cfg, {10, 4});
    REQUIRE(counts.size() == 4);
    CHECK(counts[0] == 17.0);
    CHECK(counts[1] == 17.0);
    CHECK(counts[2] == 11.0);
    CHECK(counts[3] == 5.0);
}

TEST_CASE("evaluate: preserve-everything equals the unpruned accuracy exactly") {
    ViTConfig cfg;
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 21);
    Dataset<float> data = synth_blobs<float>(22, 50, cfg.image_size, cfg.num_classes);

    EvalReport keep_all =
        evaluate<float>(model, nullptr, nullptr, data, PolicyMode::random, 1.0, 3);
    ViTConfig no_prune = cfg;
    no_prune.prune_after.clear();
    ViTModel<float> plain = ViTModel<float>::random_init(no_prune, 21);
    EvalReport unpruned =
        evaluate<float>(plain, nullptr, nullptr, data, PolicyMode::random, 1.0, 3);
    CHECK(keep_all.top1 == unpruned.top1);
    CHECK(keep_all.retention[0] == 1.0);
    CHECK(keep_all.retention[1] == 1.0);
}

TEST_CASE("evaluate: keep_prob 0 prunes everything at the first layer and still runs") {
    ViTConfig cfg;
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 23);
    Dataset<float> data = synth_blobs<float>(24, 20, cfg.image_size, cfg.num_classes);
    EvalReport rep = evaluate<float>(model, nullptr, nullptr, data, PolicyMode::random, 0.0, 3);
    CHECK(rep.retention[0] == 0.0);
    CHECK(rep.retention[1] == 0.0);
    CHECK(rep.top1 >= 0.0);  // classification still runs on the class token alone
}

TEST_CASE("evaluate: deterministic across repeated calls") {
    ViTConfig cfg;
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 25);
    ActorNet<float> actor = ActorNet<float>::make(cfg.embed_dim, 26);
    CriticNet<float> critic = CriticNet<float>::make(cfg.embed_dim, 27);
    Dataset<float> data = synth_blobs<float>(28, 30, cfg.image_size, cfg.num_classes);

    for (PolicyMode mode : {PolicyMode::mappo, PolicyMode::random}) {
        EvalReport a = evaluate(model, &actor, &critic, data, mode, 0.6, 9);
        EvalReport b = evaluate(model, &actor, &critic, data, mode, 0.6, 9);
        CHECK(a.top1 == b.top1);
        CHECK(a.retention == b.retention);
        CHECK(a.gflops == b.gflops);
    }
}

TEST_CASE("evaluate: empty dataset is an error") {
    ViTConfig cfg;
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 29);
    Dataset<float> empty;
    empty.num_classes = 4;
    empty.images = Mat<float>(0, cfg.image_size * cfg.image_size);
    CHECK_THROWS_AS(
        evaluate<float>(model, nullptr, nullptr, empty, PolicyMode::random, 1.0, 3),
        std::invalid_argument);
}

TEST_CASE("evaluate: retention is non-increasing across layers") {
    ViTConfig cfg;
    cfg.prune_after = {1, 2, 3};
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 31);
    Dataset<float> data = synth_blobs<float>(32, 40, cfg.image_size, cfg.num_classes);
    EvalReport rep = evaluate<float>(model, nullptr, nullptr, data, PolicyMode::random, 0.7, 5);
    for (size_t l = 1; l < rep.retention.size(); ++l) {
        CHECK(rep.retention[l] <= rep.retention[l - 1] + 1e-12);
    }
    CHECK(rep.retention[0] >= 0.0);
    CHECK(rep.retention[0] <= 1.0);
}

TEST_CASE("benchmark_throughput: retention 1.0 compaction costs at most 10%") {
    ViTConfig cfg;  // desk-scale geometry keeps this test fast
    cfg.prune_after = {2, 3};
    auto rows = benchmark_throughput<float>(cfg, {1.0}, 9, 2, 7);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].label == "no_pruning");
    CHECK(rows[1].retention == 1.0);
    CHECK(rows[1].images_per_second > 0.9 * rows[0].images_per_second);
}

TEST_CASE("visualize_masks: white blocks exactly where tokens were pruned") {
    ViTConfig cfg;  // 16x16, patch 4
    Dataset<float> data = synth_blobs<float>(41, 1, cfg.image_size, cfg.num_classes);
    Mat<float> image = data.images.row(0);

    MaskVec keep_all = MaskVec::Constant(cfg.num_tokens(), true);
    MaskVec pruned_one = keep_all;
    pruned_one(5) = false;  // patch index 4: grid position (row 1, col 0)
    MaskVec all_gone = keep_all;
    for (Index tok = 1; tok < all_gone.size(); ++tok) {
        all_gone(tok) = false;
    }

    const std::string stem = "/tmp/vitprune_test_masks/mask";
    std::filesystem::create_directories("/tmp/vitprune_test_masks");
    auto files = visualize_masks(image, cfg, {keep_all, pruned_one, all_gone}, stem);
    REQUIRE(files.size() == 3);

    auto read_pgm = [](const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        std::string magic;
        int w = 0, h = 0, maxval = 0;
        in >> magic >> w >> h >> maxval;
        in.get();
        REQUIRE(magic == "P5");
        REQUIRE(w == 16);
        REQUIRE(h == 16);
        REQUIRE(maxval == 255);
        std::vector<unsigned char> px(static_cast<size_t>(w * h));
        in.read(reinterpret_cast<char*>(px.data()), w * h);
        return px;
    };

    // nothing pruned: grayscale input byte for byte
    auto px0 = read_pgm(files[0]);
    for (int i = 0; i < 256; ++i) {
        const auto want = static_cast<unsigned char>(
            std::lround(std::min(1.0f, std::max(0.0f, image(0, i))) * 255.0f));
        CHECK(px0[static_cast<size_t>(i)] == want);
    }

    // one pruned token: exactly one 4x4 white block at its grid position
    auto px1 = read_pgm(files[1]);
    int diff = 0;
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            const size_t i = static_cast<size_t>(y * 16 + x);
            const bool in_block = y >= 4 && y < 8 && x < 4;
            if (in_block) {
                CHECK(px1[i] == 255);
                diff += px1[i] != px0[i] ? 1 : 0;
            } else {
                CHECK(px1[i] == px0[i]);
            }
        }
    }
    CHECK(diff > 0);

    // everything pruned: fully white
    auto px2 = read_pgm(files[2]);
    for (unsigned char v : px2) {
        CHECK(v == 255);
    }
}

TEST_CASE("sweep: a single-ratio grid yields one row and reruns identically") {
    ViTConfig cfg;
    cfg.prune_after = {1, 2};
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 51);
    Dataset<float> train = synth_blobs<float>(52, 32, cfg.image_size, cfg.num_classes);
    Dataset<float> test = synth_blobs<float>(53, 16, cfg.image_size, cfg.num_classes);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 16;
    tc.k_iters = 2;
    tc.seed = 54;
    tc.wall_clock = false;

    auto rows = sweep_alpha_beta(train, test, model, tc, {0.2});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].ratio == 0.2);
    CHECK(rows[0].retention.size() == 2);

    auto rows2 = sweep_alpha_beta(train, test, model, tc, {0.2});
    CHECK(rows2[0].top1 == rows[0].top1);
    CHECK(rows2[0].retention == rows[0].retention);
    CHECK(rows2[0].gflops == rows[0].gflops);

    const std::string csv_path = "/tmp/vitprune_test_sweep.csv";
    write_sweep_csv(rows, 2, csv_path);
    std::ifstream in(csv_path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "ratio,retention_l1,retention_l2,gflops,top1");
}
