#include <gtest/gtest.h>

#include <fstream>
#include <unistd.h>

#include "apiq/calib/quantize.hpp"
#include "apiq/eval/eval.hpp"
#include "apiq/model/checkpoint.hpp"
#include "apiq/train/corpus.hpp"
#include "apiq/train/train.hpp"

using namespace apiq;
using namespace apiq::train;
using apiq::model::Proj;

namespace {

model::ModelConfig small_config()
{
    model::ModelConfig c;
    c.vocab = 256;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.n_blocks = 2;
    c.max_seq = 32;
    return c;
}

std::vector<std::int32_t> text_tokens(std::size_t n)
{
    const std::string s = "the river ran past the mill and the mill wheel turned slowly in the sun. ";
    std::vector<std::int32_t> t;
    while (t.size() < n)
        for (unsigned char ch : s) t.push_back(ch);
    t.resize(n);
    return t;
}

model::TinyTransformer<float> quantized_model(std::uint64_t seed, calib::Method m = calib::Method::QloraInit)
{
    const auto fp = model::init_model<float>(small_config(), seed);
    calib::CalibPlan plan;
    plan.method = m;
    plan.spec = quant::QuantSpec{2, 8, quant::ClipGranularity::PerMatrix};
    plan.rank = 2;
    plan.epochs = 2;
    plan.seed = seed;
    RngState rng(seed);
    calib::CalibSet cs{text_tokens(64), 4, 16};
    return calib::quantize_model(fp, cs, plan).model;
}

FinetuneConfig small_finetune(LoraPosition pos)
{
    FinetuneConfig f;
    f.epochs = 1;
    f.batch = 4;
    f.seq_len = 16;
    f.lr = 5e-3;
    f.position = pos;
    f.seed = 3;
    return f;
}

} // namespace

TEST(Schedule, StaticIsConstant)
{
    for (std::size_t s : {0u, 5u, 99u}) EXPECT_EQ(learning_rate(Schedule::Static, 0.01, s, 100, 0.03), 0.01);
}

TEST(Schedule, CosineWarmsUpThenDecays)
{
    EXPECT_NEAR(learning_rate(Schedule::Cosine, 1.0, 0, 100, 0.03), 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(learning_rate(Schedule::Cosine, 1.0, 2, 100, 0.03), 1.0, 1e-12);
    EXPECT_NEAR(learning_rate(Schedule::Cosine, 1.0, 3, 100, 0.03), 1.0, 1e-12);
    EXPECT_NEAR(learning_rate(Schedule::Cosine, 1.0, 3 + 97 / 2, 100, 0.03), 0.5, 0.02);
    EXPECT_LT(learning_rate(Schedule::Cosine, 1.0, 99, 100, 0.03), 1e-2);
    double prev = 2.0;
    for (std::size_t s = 3; s < 100; ++s) {
        const double lr = learning_rate(Schedule::Cosine, 1.0, s, 100, 0.03);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
}

TEST(Schedule, NamesParse)
{
    EXPECT_EQ(parse_schedule("cosine"), Schedule::Cosine);
    EXPECT_EQ(parse_position("ffn"), LoraPosition::Ffn);
    EXPECT_THROW(parse_schedule("linear"), ConfigError);
    EXPECT_THROW(parse_position("mlp"), ConfigError);
    EXPECT_TRUE(selected(LoraPosition::Attn, Proj::O));
    EXPECT_FALSE(selected(LoraPosition::Attn, Proj::Gate));
    EXPECT_TRUE(selected(LoraPosition::Ffn, Proj::Down));
    EXPECT_FALSE(selected(LoraPosition::Ffn, Proj::V));
}

TEST(Corpus, BytesRoundTripAndSplit)
{
    std::string raw = "first doc";
    raw.push_back('\0');
    raw += "second \xc3\xa9t\xc3\xa9";
    raw.push_back('\0');
    raw += "third";
    const auto c = Corpus::from_bytes(raw);
    EXPECT_EQ(c.bytes(), raw);
    EXPECT_EQ(c.tokens.size(), raw.size());
    EXPECT_EQ(c.documents(), 3u);
    EXPECT_EQ(c.train().size() + c.heldout().size(), raw.size());
    EXPECT_EQ(c.train().size(), raw.size() * 9 / 10);
    for (auto t : c.tokens) EXPECT_LT(t, 256);
}

TEST(Corpus, MissingOrEmptyFileIsInputError)
{
    EXPECT_THROW(Corpus::load("/nonexistent/corpus.txt"), InputError);
    const std::string path = "/tmp/apiq_empty_corpus_" + std::to_string(getpid());
    std::ofstream(path).close();
    EXPECT_THROW(Corpus::load(path), InputError);
    std::remove(path.c_str());
}

TEST(Pretrain, ZeroStepsLeavesTheModelAtInitialization)
{
    auto m = model::init_model<float>(small_config(), 1);
    PretrainConfig pc;
    pc.steps = 0;
    pc.seq_len = 16;
    const double loss = pretrain(m, text_tokens(100), pc);
    EXPECT_TRUE(std::isnan(loss));
    EXPECT_EQ(model::to_archive(m).serialize(), model::to_archive(model::init_model<float>(small_config(), 1)).serialize());
}

TEST(Pretrain, LossFallsAndRunsAreReproducible)
{
    PretrainConfig pc;
    pc.steps = 60;
    pc.batch = 4;
    pc.seq_len = 16;
    pc.lr = 1e-2;
    pc.seed = 2;
    const auto data = text_tokens(600);
    auto a = model::init_model<float>(small_config(), 2);
    auto b = a;
    std::vector<double> la, lb;
    pretrain(a, data, pc, [&](const StepLog& s) { la.push_back(s.loss); });
    pretrain(b, data, pc, [&](const StepLog& s) { lb.push_back(s.loss); });
    EXPECT_EQ(la, lb);
    EXPECT_EQ(model::to_archive(a).serialize(), model::to_archive(b).serialize());
    EXPECT_LT(la.back(), 0.6 * la.front());
}

TEST(Pretrain, RejectsBadSettings)
{
    auto m = model::init_model<float>(small_config(), 3);
    PretrainConfig pc;
    pc.seq_len = 64;
    EXPECT_THROW(pretrain(m, text_tokens(200), pc), ConfigError);
    pc.seq_len = 16;
    EXPECT_THROW(pretrain(m, text_tokens(10), pc), InputError);
    auto q = quantized_model(3);
    EXPECT_THROW(pretrain(q, text_tokens(200), pc), ArgumentError);
}

TEST(Finetune, OnlySelectedAdaptersMoveAndCodesStayFrozen)
{
    const auto data = text_tokens(400);
    for (LoraPosition pos : {LoraPosition::All, LoraPosition::Attn, LoraPosition::Ffn}) {
        const auto before = quantized_model(4);
        auto after = before;
        finetune(after, data, small_finetune(pos));
        std::size_t moved = 0;
        for (std::size_t b = 0; b < 2; ++b)
            for (Proj p : model::kAllProj) {
                const auto& q0 = *before.linear(b, p).q;
                const auto& q1 = *after.linear(b, p).q;
                EXPECT_EQ(q0.codes.bytes, q1.codes.bytes);
                EXPECT_TRUE(bitwise_equal(q0.params.scale, q1.params.scale));
                EXPECT_EQ(q0.params.zero, q1.params.zero);
                EXPECT_TRUE(bitwise_equal(q0.base, q1.base));
                const bool changed = !bitwise_equal(q0.lora.A, q1.lora.A) || !bitwise_equal(q0.lora.B, q1.lora.B);
                EXPECT_EQ(changed, selected(pos, p)) << model::layer_name(b, p) << " " << to_string(pos);
                moved += changed;
            }
        EXPECT_EQ(moved, pos == LoraPosition::All ? 14u : (pos == LoraPosition::Attn ? 8u : 6u));
        EXPECT_TRUE(bitwise_equal(before.tok_embedding, after.tok_embedding));
        EXPECT_TRUE(bitwise_equal(before.blocks[1].ffn_norm, after.blocks[1].ffn_norm));
    }
}

TEST(Finetune, ImprovesTheQloraStartingPoint)
{
    const auto data = text_tokens(800);
    auto m = quantized_model(5);
    const double before = eval::perplexity(m, data, 32).ppl;
    auto f = small_finetune(LoraPosition::All);
    std::vector<double> losses;
    finetune(m, data, f, [&](const EpochLog& e) { losses.push_back(e.train_loss); });
    ASSERT_EQ(losses.size(), 1u);
    EXPECT_LT(eval::perplexity(m, data, 32).ppl, before);
}

TEST(Finetune, IsReproducibleAndSurvivesACheckpoint)
{
    const auto data = text_tokens(300);
    auto a = quantized_model(6, calib::Method::ApiqBw);
    auto b = a;
    finetune(a, data, small_finetune(LoraPosition::All));
    finetune(b, data, small_finetune(LoraPosition::All));
    const auto bytes = model::to_archive(a).serialize();
    EXPECT_EQ(bytes, model::to_archive(b).serialize());
    const auto back = model::from_archive(model::Archive::parse(bytes));
    EXPECT_EQ(model::to_archive(back).serialize(), bytes);
}

TEST(Finetune, NeedsAdaptersAndQuantizedLayers)
{
    const auto data = text_tokens(300);
    auto fp = model::init_model<float>(small_config(), 7);
    EXPECT_THROW(finetune(fp, data, small_finetune(LoraPosition::All)), ArgumentError);
    const auto fp2 = model::init_model<float>(small_config(), 7);
    calib::CalibPlan plan;
    plan.method = calib::Method::Rtn;
    plan.spec = quant::QuantSpec{2, 8};
    plan.rank = 0;
    auto q = calib::quantize_model(fp2, calib::CalibSet{}, plan).model;
    EXPECT_THROW(finetune(q, data, small_finetune(LoraPosition::All)), ConfigError);
}
