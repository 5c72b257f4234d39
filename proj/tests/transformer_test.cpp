#include <gtest/gtest.h>

#include <fstream>

#include "json.hpp"
#include "kdlab/transformer.hpp"
#include "test_util.hpp"

using namespace kdlab;

namespace {

TransformerModel tiny_model(int layers = 2, int heads = 2, int dh = 8, int df = 16, int vocab = 12, int max_len = 8,
                            std::uint64_t seed = 3) {
    return init_parameters(ModelConfig{layers, heads, dh, df, vocab, max_len, 0.0}, seed);
}

} // namespace

TEST(ModelConfigTest, ValidatesDivisibility) {
    ModelConfig bad{2, 3, 8, 16, 12, 8, 0.0};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    ModelConfig good{2, 2, 8, 16, 12, 8, 0.0};
    EXPECT_NO_THROW(good.validate());
    EXPECT_EQ(good.head_size(), 4);
}

TEST(ModelConfigTest, PresetsMatchPublishedArchitectures) {
    struct Row {
        const char* name;
        int l, ah, dh, df;
    };
    const Row rows[] = {{"teacher", 12, 12, 768, 3072}, {"6l-distilbert", 6, 12, 768, 3072},
                        {"6l", 6, 12, 384, 1536},       {"4l", 4, 12, 576, 768},
                        {"3l", 3, 12, 384, 1024}};
    for (const Row& r : rows) {
        const ModelConfig c = preset_config(r.name);
        EXPECT_EQ(c.num_layers, r.l) << r.name;
        EXPECT_EQ(c.num_heads, r.ah) << r.name;
        EXPECT_EQ(c.hidden_size, r.dh) << r.name;
        EXPECT_EQ(c.ff_size, r.df) << r.name;
        EXPECT_EQ(c.vocab_size, 30000) << r.name;
    }
    EXPECT_THROW(preset_config("5l"), std::invalid_argument);
}

TEST(ModelConfigTest, PublishedParameterCounts) {
    // ~110M for the teacher and ~16M for 3L at 30K vocab, within 2%.
    const double teacher = static_cast<double>(config_parameter_count(preset_config("teacher"), false));
    EXPECT_NEAR(teacher, 110e6, 0.02 * 110e6);
    const double small = static_cast<double>(config_parameter_count(preset_config("3l"), false));
    EXPECT_NEAR(small, 16e6, 0.02 * 16e6);
}

TEST(InitTest, DeterministicGivenSeed) {
    TransformerModel a = tiny_model();
    TransformerModel b = tiny_model();
    auto pa = a.named_parameters();
    auto pb = b.named_parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_EQ(pa[i].first, pb[i].first);
        EXPECT_EQ(pa[i].second.values(), pb[i].second.values()) << pa[i].first;
    }
    TransformerModel c = tiny_model(2, 2, 8, 16, 12, 8, 4);
    EXPECT_NE(a.tok_emb.values(), c.tok_emb.values());
}

TEST(InitTest, CountRoutineMatchesActualParameters) {
    TransformerModel m = tiny_model();
    EXPECT_EQ(m.parameter_count(), config_parameter_count(m.config, true));
    EXPECT_EQ(m.encoder_parameter_count(), config_parameter_count(m.config, false));
    TransformerModel desk = init_parameters(preset_config("desk-teacher"), 1);
    EXPECT_EQ(desk.parameter_count(), config_parameter_count(desk.config, true));
}

TEST(InitTest, BiasesZeroGainsOne) {
    TransformerModel m = tiny_model();
    for (double v : m.layers[0].bq.values()) EXPECT_EQ(v, 0.0);
    for (double v : m.layers[0].ln1_g.values()) EXPECT_EQ(v, 1.0);
    // truncated normal: no weight beyond 2 sigma
    for (double v : m.tok_emb.values()) EXPECT_LE(std::fabs(v), 0.04);
}

TEST(ForwardTest, SingleTokenAttentionIsOne) {
    TransformerModel m = tiny_model();
    ForwardTrace t = forward(m, {5});
    for (const auto& layer : t.attentions)
        for (const auto& head : layer) {
            ASSERT_EQ(head.shape(), (Shape{1, 1}));
            EXPECT_DOUBLE_EQ(head(0, 0), 1.0);
        }
}

TEST(ForwardTest, ShapeContract) {
    TransformerModel m = tiny_model();
    ForwardTrace t = forward(m, {1, 2, 3});
    ASSERT_EQ(t.hidden_states.size(), 3u); // H_0..H_2
    for (const Tensor& h : t.hidden_states) EXPECT_EQ(h.shape(), (Shape{3, 8}));
    EXPECT_EQ(t.logits.shape(), (Shape{3, 12}));
    ASSERT_EQ(t.queries.size(), 2u);
    ASSERT_EQ(t.queries[0].size(), 2u);
    EXPECT_EQ(t.queries[0][0].shape(), (Shape{3, 4}));
    EXPECT_TRUE(t.logits.all_finite());
}

TEST(ForwardTest, RejectsBadTokensAndLength) {
    TransformerModel m = tiny_model();
    EXPECT_THROW(forward(m, {12}), std::invalid_argument);
    EXPECT_THROW(forward(m, {-1}), std::invalid_argument);
    EXPECT_THROW(forward(m, std::vector<int>(9, 1)), std::invalid_argument);
    EXPECT_THROW(forward(m, {}), std::invalid_argument);
}

TEST(ForwardTest, AttentionRowsSumToOne) {
    TransformerModel m = tiny_model();
    ForwardTrace t = forward(m, {1, 2, 3, 4, 5});
    for (const auto& layer : t.attentions)
        for (const auto& head : layer)
            for (std::size_t r = 0; r < head.rows(); ++r) {
                double sum = 0.0;
                for (std::size_t c = 0; c < head.cols(); ++c) sum += head(r, c);
                EXPECT_NEAR(sum, 1.0, 1e-12);
            }
}

TEST(ForwardTest, Deterministic) {
    TransformerModel m = tiny_model();
    ForwardTrace a = forward(m, {3, 1, 7});
    ForwardTrace b = forward(m, {3, 1, 7});
    EXPECT_EQ(a.logits.values(), b.logits.values());
    EXPECT_EQ(a.hidden_states[2].values(), b.hidden_states[2].values());
}

TEST(ForwardTest, PermutationEquivariantOnlyWithoutPositions) {
    TransformerModel m = tiny_model();
    const std::vector<int> tokens = {1, 4, 7, 2};
    const std::vector<int> permuted = {7, 2, 1, 4};    // permutation p: out[i] = tokens[p[i]]
    const std::vector<std::size_t> perm = {2, 3, 0, 1};

    ForwardTrace base = forward(m, tokens);
    ForwardTrace shuffled = forward(m, permuted);
    double diff_with_pos = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t j = 0; j < 12; ++j)
            diff_with_pos = std::max(diff_with_pos, std::fabs(base.logits(perm[i], j) - shuffled.logits(i, j)));
    EXPECT_GT(diff_with_pos, 1e-4); // position embeddings break equivariance

    for (double& v : m.pos_emb.values()) v = 0.0;
    ForwardTrace base0 = forward(m, tokens);
    ForwardTrace shuffled0 = forward(m, permuted);
    for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t j = 0; j < 12; ++j)
            EXPECT_NEAR(base0.logits(perm[i], j), shuffled0.logits(i, j), 1e-12);
}

TEST(ForwardTest, LeftAlignedPadMaskMatchesTruncatedForward) {
    TransformerModel m = tiny_model();
    const std::vector<int> real = {3, 8, 5};
    std::vector<int> padded = real;
    padded.push_back(0);
    padded.push_back(0);
    ForwardOptions opts;
    opts.n_real = real.size();
    ForwardTrace masked = forward(m, padded, opts);
    ForwardTrace plain = forward(m, real);
    for (std::size_t i = 0; i < real.size(); ++i)
        for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(masked.logits(i, j), plain.logits(i, j), 1e-15);
}

TEST(ForwardTest, MatchesIndependentNumericalOracle) {
    std::ifstream in(std::string(KDLAB_TEST_DATA_DIR) + "/tiny_forward.json");
    ASSERT_TRUE(in) << "missing tiny_forward.json";
    nlohmann::json j;
    in >> j;

    ModelConfig cfg;
    cfg.num_layers = j["config"]["num_layers"];
    cfg.num_heads = j["config"]["num_heads"];
    cfg.hidden_size = j["config"]["hidden_size"];
    cfg.ff_size = j["config"]["ff_size"];
    cfg.vocab_size = j["config"]["vocab_size"];
    cfg.max_seq_len = j["config"]["max_seq_len"];
    TransformerModel m = zeros_model(cfg);
    for (auto& [name, t] : m.named_parameters()) {
        const auto& w = j["weights"][name];
        ASSERT_FALSE(w.is_null()) << name;
        std::vector<double> data = w["data"].get<std::vector<double>>();
        ASSERT_EQ(data.size(), t.numel()) << name;
        Tensor dst = t;
        dst.values() = data;
    }

    const std::vector<int> tokens = j["tokens"].get<std::vector<int>>();
    ForwardTrace trace = forward(m, tokens);

    const std::vector<double> h0 = j["expected_h0"].get<std::vector<double>>();
    for (std::size_t i = 0; i < h0.size(); ++i) EXPECT_NEAR(trace.hidden_states[0](i), h0[i], 1e-10);
    const std::vector<double> attn = j["expected_attention"].get<std::vector<double>>();
    for (std::size_t i = 0; i < attn.size(); ++i) EXPECT_NEAR(trace.attentions[0][0](i), attn[i], 1e-10);
    const std::vector<double> h1 = j["expected_h1"].get<std::vector<double>>();
    for (std::size_t i = 0; i < h1.size(); ++i) EXPECT_NEAR(trace.hidden_states[1](i), h1[i], 1e-10);
    const std::vector<double> logits = j["expected_logits"].get<std::vector<double>>();
    for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_NEAR(trace.logits(i), logits[i], 1e-10);
}

TEST(TeacherInitTest, CopiesPickedLayersBitwise) {
    TransformerModel teacher = tiny_model(4, 2, 8, 16);
    ModelConfig student_cfg = teacher.config;
    student_cfg.num_layers = 2;
    TransformerModel student = init_from_teacher_layers(student_cfg, teacher, {2, 4});
    EXPECT_EQ(student.layers[0].wq.values(), teacher.layers[1].wq.values());
    EXPECT_EQ(student.layers[1].ff2_w.values(), teacher.layers[3].ff2_w.values());
    EXPECT_EQ(student.tok_emb.values(), teacher.tok_emb.values());
    EXPECT_EQ(student.out_w.values(), teacher.out_w.values());
    // copies are detached: mutating the student leaves the teacher intact
    student.layers[0].wq(0) = 123.0;
    EXPECT_NE(student.layers[0].wq(0), teacher.layers[1].wq(0));
}

TEST(TeacherInitTest, RejectsMismatchedHiddenSize) {
    TransformerModel teacher = tiny_model(4, 2, 8, 16);
    ModelConfig narrow{2, 2, 4, 16, 12, 8, 0.0};
    try {
        init_from_teacher_layers(narrow, teacher, {2, 4});
        FAIL() << "expected architecture-constraint error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("architecture"), std::string::npos);
    }
    ModelConfig ok = teacher.config;
    ok.num_layers = 2;
    EXPECT_THROW(init_from_teacher_layers(ok, teacher, {1, 2, 3}), std::invalid_argument);
    EXPECT_THROW(init_from_teacher_layers(ok, teacher, {0, 4}), std::invalid_argument);
}

TEST(TeacherInitTest, FullCopyReproducesTeacherLogits) {
    TransformerModel teacher = tiny_model(4, 2, 8, 16);
    TransformerModel clone = init_from_teacher_layers(teacher.config, teacher, {1, 2, 3, 4});
    const std::vector<int> tokens = {2, 9, 4, 4, 1};
    ForwardTrace a = forward(teacher, tokens);
    ForwardTrace b = forward(clone, tokens);
    EXPECT_EQ(a.logits.values(), b.logits.values());
}

TEST(ForwardTest, GradientsFlowThroughWholeStack) {
    // finite-difference check of a full forward against a scalar readout
    TransformerModel m = tiny_model(1, 2, 4, 8, 6, 4, 9);
    const std::vector<int> tokens = {1, 3};
    kdlab::Rng rng(31);
    Tensor target = kdtest::random_tensor({2, 6}, rng);
    auto make_loss = [&](Graph* g) {
        ForwardOptions opts;
        opts.graph = g;
        return ops::mse(g, forward(m, tokens, opts).logits, target);
    };
    auto loss_value = [&] { return make_loss(nullptr).item(); };
    auto backward = [&] {
        Graph g;
        Tensor l = make_loss(&g);
        g.backward(l);
    };
    auto res = kdtest::check_gradients(loss_value, m.parameters(), backward);
    EXPECT_TRUE(res.ok) << res.detail << " rel err " << res.worst;
}
