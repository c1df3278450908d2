#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"

namespace seqshort {
namespace {

namespace fs = std::filesystem;

class CheckpointTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("seqshort_ckpt_" + std::to_string(::getpid()));
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path dir_;
};

ModelConfig small_config() {
    auto cfg = ModelConfig::toy(6, 3);
    cfg.encoder.ffn_dim = 32;
    return cfg;
}

TEST_F(CheckpointTest, SaveLoadSaveIsByteIdentical) {
    ClassifierModel<float> model(small_config(), 1);
    const auto first = dir_ / "a.sqck";
    checkpoint_save(model, first);
    const auto loaded = checkpoint_load<float>(first);
    EXPECT_EQ(loaded.snapshot(), model.snapshot());
    EXPECT_EQ(checkpoint_bytes(loaded), io::read_file(first));
}

TEST_F(CheckpointTest, EmbeddedConfigRestoresNonDefaultSettings) {
    auto cfg = small_config();
    cfg.encoder.head_hidden_layer = true;
    cfg.encoder.use_positional_embeddings = false;
    cfg.encoder.cls_first = false;
    cfg.encoder.freeze_policy = FreezePolicy::frozen_except_layernorm;
    cfg.seqshort.bias = true;
    ClassifierModel<double> model(cfg, 2);
    checkpoint_save(model, dir_ / "b.sqck");
    const auto back = checkpoint_config(dir_ / "b.sqck");
    EXPECT_TRUE(back.encoder.head_hidden_layer);
    EXPECT_FALSE(back.encoder.use_positional_embeddings);
    EXPECT_FALSE(back.encoder.cls_first);
    EXPECT_EQ(back.encoder.freeze_policy, FreezePolicy::frozen_except_layernorm);
    EXPECT_TRUE(back.seqshort.bias);
    EXPECT_EQ(back.encoder.ffn_dim, 32u);
    EXPECT_EQ(back.encoder.num_classes, 3u);

    const auto loaded = checkpoint_load<double>(dir_ / "b.sqck");
    std::mt19937_64 rng(2);
    const auto bag = testing::random_tensor<double>({7, 6}, rng);
    EXPECT_EQ(loaded.forward(bag).logits.value(), model.forward(bag).logits.value());
    EXPECT_EQ(count_parameters(loaded, true), count_parameters(model, true));
}

TEST_F(CheckpointTest, RejectsCorruption) {
    ClassifierModel<float> model(small_config(), 3);
    const auto good = checkpoint_bytes(model);
    const auto path = dir_ / "c.sqck";

    auto bad_magic = good;
    bad_magic[0] = 'X';
    io::write_file(path, bad_magic);
    EXPECT_THROW(checkpoint_load<float>(path), MagicError);

    auto bad_version = good;
    bad_version[4] = 9;
    io::write_file(path, bad_version);
    EXPECT_THROW(checkpoint_load<float>(path), VersionError);

    auto bad_payload = good;
    bad_payload[good.size() / 2] ^= 0x40;
    io::write_file(path, bad_payload);
    EXPECT_THROW(checkpoint_load<float>(path), ChecksumError);

    const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() / 3));
    io::write_file(path, truncated);
    EXPECT_THROW(checkpoint_load<float>(path), TruncationError);

    EXPECT_THROW(checkpoint_load<float>(dir_ / "missing.sqck"), DataError);
}

TEST_F(CheckpointTest, ShapeMismatchNamesTheTensor) {
    ClassifierModel<float> model(small_config(), 4);
    const auto path = dir_ / "d.sqck";
    checkpoint_save(model, path);

    auto wider = small_config();
    wider.encoder.ffn_dim = 48;
    try {
        checkpoint_load<float>(path, wider);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("blocks.0.ffn.w1"), std::string::npos) << e.what();
    }

    auto with_hidden = small_config();
    with_hidden.encoder.head_hidden_layer = true;
    try {
        checkpoint_load<float>(path, with_hidden);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("head.w_hidden"), std::string::npos) << e.what();
    }

    auto no_pos = small_config();
    no_pos.encoder.use_positional_embeddings = false;
    try {
        checkpoint_load<float>(path, no_pos);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("pos_embeddings"), std::string::npos) << e.what();
    }
}

TEST_F(CheckpointTest, FloatAndDoubleModelsShareTheFormat) {
    ClassifierModel<float> model(small_config(), 5);
    checkpoint_save(model, dir_ / "e.sqck");
    const auto promoted = checkpoint_load<double>(dir_ / "e.sqck");
    for (const auto* p : model.parameters()) {
        const auto& q = promoted.parameter(p->name()).value();
        for (std::size_t i = 0; i < q.size(); ++i) EXPECT_EQ(q[i], static_cast<double>(p->value()[i]));
    }
}

}  // namespace
}  // namespace seqshort
