#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "vitprune/checkpoint.hpp"
#include "vitprune/pruning.hpp"
#include "vitprune/rl_train.hpp"
#include "vitprune/vit.hpp"

using namespace vitprune;

TEST_CASE("checkpoint: float round trip is bit-exact and manifest is complete") {
    const std::string stem = "/tmp/vitprune_test_ckpt";
    ViTConfig cfg;
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 5);
    ActorNet<float> actor = ActorNet<float>::make(cfg.embed_dim, 6);
    CriticNet<float> critic = CriticNet<float>::make(cfg.embed_dim, 7);

    NamedParams<float> all = model.named_params();
    for (auto& e : actor.named_params()) all.push_back(e);
    for (auto& e : critic.named_params()) all.push_back(e);
    save_checkpoint(stem + ".json", stem + ".bin", all);

    // manifest carries name/shape/dtype/offset per entry, in order
    std::ifstream mf(stem + ".json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    REQUIRE(manifest.at("params").size() == all.size());
    size_t expect_offset = 0;
    for (size_t i = 0; i < all.size(); ++i) {
        const auto& e = manifest.at("params").at(i);
        CHECK(e.at("name").get<std::string>() == all[i].first);
        CHECK(e.at("dtype").get<std::string>() == "f32");
        CHECK(e.at("offset").get<size_t>() == expect_offset);
        auto shape = e.at("shape").get<std::vector<long>>();
        CHECK(shape[0] == all[i].second->value.rows());
        CHECK(shape[1] == all[i].second->value.cols());
        expect_offset += static_cast<size_t>(all[i].second->value.size()) * sizeof(float);
    }
    CHECK(std::filesystem::file_size(stem + ".bin") == expect_offset);

    // perturb everything, reload, compare bit-exactly
    ViTModel<float> model2 = ViTModel<float>::random_init(cfg, 50);
    ActorNet<float> actor2 = ActorNet<float>::make(cfg.embed_dim, 51);
    CriticNet<float> critic2 = CriticNet<float>::make(cfg.embed_dim, 52);
    load_all_checkpoint(model2, &actor2, &critic2, stem);
    NamedParams<float> all2 = model2.named_params();
    for (auto& e : actor2.named_params()) all2.push_back(e);
    for (auto& e : critic2.named_params()) all2.push_back(e);
    REQUIRE(all2.size() == all.size());
    for (size_t i = 0; i < all.size(); ++i) {
        CHECK((all2[i].second->value - all[i].second->value).cwiseAbs().maxCoeff() == 0.0f);
    }
    CHECK(param_group_hash(all2, "") == param_group_hash(all, ""));
}

TEST_CASE("checkpoint: namespaced groups load independently") {
    const std::string stem = "/tmp/vitprune_test_ckpt2";
    ViTConfig cfg;
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 9);
    ActorNet<float> actor = ActorNet<float>::make(cfg.embed_dim, 10);
    CriticNet<float> critic = CriticNet<float>::make(cfg.embed_dim, 11);
    save_all_checkpoint(model, actor, critic, stem);

    // a vit-only load ignores the actor./critic. groups in the file
    ViTModel<float> fresh = ViTModel<float>::random_init(cfg, 12);
    load_all_checkpoint<float>(fresh, nullptr, nullptr, stem);
    NamedParams<float> a = model.named_params();
    NamedParams<float> b = fresh.named_params();
    CHECK(param_group_hash(a, "vit.") == param_group_hash(b, "vit."));
}

TEST_CASE("checkpoint: shape mismatch and missing parameters are errors") {
    const std::string stem = "/tmp/vitprune_test_ckpt3";
    ViTConfig cfg;
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 13);
    save_checkpoint(stem + ".json", stem + ".bin", model.named_params());

    ViTConfig other = cfg;
    other.embed_dim = 64;
    ViTModel<float> wrong = ViTModel<float>::random_init(other, 14);
    CHECK_THROWS_AS(
        load_checkpoint(stem + ".json", stem + ".bin", wrong.named_params()),
        std::runtime_error);

    ActorNet<float> actor = ActorNet<float>::make(cfg.embed_dim, 15);
    CHECK_THROWS_AS(
        load_checkpoint(stem + ".json", stem + ".bin", actor.named_params()),
        std::runtime_error);  // actor.* not present in a vit-only checkpoint
}

TEST_CASE("param_group_hash: sensitive to single-entry changes within the group only") {
    ViTConfig cfg;
    ViTModel<float> model = ViTModel<float>::random_init(cfg, 16);
    NamedParams<float> named = model.named_params();
    const uint64_t h = param_group_hash(named, "vit.blocks.0.");
    const uint64_t h_other = param_group_hash(named, "vit.blocks.1.");
    model.blocks[0].wq.value(0, 0) += 1.0f;
    CHECK(param_group_hash(named, "vit.blocks.0.") != h);
    CHECK(param_group_hash(named, "vit.blocks.1.") == h_other);
}
