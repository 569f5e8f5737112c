#include <catch2/catch_amalgamated.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>

#include "mohawk/checkpoint.hpp"
#include "mohawk/config.hpp"
#include "mohawk/corpus.hpp"
#include "mohawk/csv.hpp"
#include "mohawk/rng.hpp"

using namespace mohawk;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace

TEST_CASE("corpus generation is deterministic and well formed") {
    std::vector<uint16_t> a = corpus::generate(9, 5000);
    std::vector<uint16_t> b = corpus::generate(9, 5000);
    REQUIRE(a == b);
    std::vector<uint16_t> c = corpus::generate(10, 5000);
    REQUIRE(a != c);
    for (uint16_t t : a) REQUIRE(t < 256);

    corpus::write_tokens("/tmp/mohawk_corpus_test.tokens", a);
    REQUIRE(slurp("/tmp/mohawk_corpus_test.tokens").size() == 10000);  // u16 per token
    std::vector<uint16_t> back = corpus::read_tokens("/tmp/mohawk_corpus_test.tokens");
    REQUIRE(back == a);
}

TEST_CASE("empirical unigram perplexity matches the analytic value") {
    corpus::GrammarSpec g;
    std::vector<uint16_t> tokens = corpus::generate(123, 2000000, g);
    double emp = corpus::empirical_unigram_perplexity(tokens);
    double ana = corpus::analytic_unigram_perplexity(g);
    REQUIRE(std::abs(emp - ana) / ana <= 0.02);
}

TEST_CASE("container round-trips bitwise, including odd payloads") {
    Rng rng(31337);
    std::vector<io::NamedTensor> arrays;
    Tensor t1({3, 4});
    for (i64 i = 0; i < t1.size(); ++i) t1[i] = rng.uniform(-10, 10);
    arrays.push_back({"alpha", t1});
    Tensor t2({2, 2, 2});
    for (i64 i = 0; i < t2.size(); ++i) t2[i] = rng.normal();
    arrays.push_back({"beta.gamma", t2});
    // raw bit patterns survive because the payload is never parsed as numbers
    Tensor t3({4});
    t3[0] = io::bits_to_double(0xDEADBEEFCAFEBABEull);
    t3[1] = io::bits_to_double(0x7FF0000000000001ull);  // a signalling NaN pattern
    t3[2] = -0.0;
    t3[3] = std::numeric_limits<double>::infinity();
    arrays.push_back({"bits", t3});

    const std::string path = "/tmp/mohawk_container_test.mhwk";
    io::write_container(path, arrays);
    auto back = io::read_container(path);
    REQUIRE(back.size() == arrays.size());
    for (size_t i = 0; i < arrays.size(); ++i) {
        REQUIRE(back[i].name == arrays[i].name);
        REQUIRE(back[i].tensor.shape == arrays[i].tensor.shape);
        for (i64 j = 0; j < arrays[i].tensor.size(); ++j)
            REQUIRE(io::double_to_bits(back[i].tensor[j]) ==
                    io::double_to_bits(arrays[i].tensor[j]));
    }

    // a second write of the same arrays is byte-identical
    const std::string path2 = "/tmp/mohawk_container_test2.mhwk";
    io::write_container(path2, arrays);
    REQUIRE(slurp(path) == slurp(path2));
}

TEST_CASE("container rejects bad magic and versions") {
    const std::string path = "/tmp/mohawk_container_bad.mhwk";
    io::write_container(path, {{"x", Tensor({2})}});

    std::string raw = slurp(path);
    std::string corrupted = raw;
    corrupted[0] = 'X';
    spit(path, corrupted);
    REQUIRE_THROWS_AS(io::read_container(path), IoError);

    corrupted = raw;
    corrupted[4] = 99;  // version field
    spit(path, corrupted);
    REQUIRE_THROWS_AS(io::read_container(path), IoError);

    corrupted = raw.substr(0, raw.size() - 4);  // truncated payload
    spit(path, corrupted);
    REQUIRE_THROWS_AS(io::read_container(path), IoError);

    REQUIRE_THROWS_AS(io::require_array({}, "nope"), IoError);
}

TEST_CASE("csv doubles round-trip through 17 significant digits") {
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
        double v = std::exp(rng.uniform(-20.0, 20.0)) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        std::string s = io::csv_double(v);
        double back = 0.0;
        auto res = std::from_chars(s.data(), s.data() + s.size(), back);
        REQUIRE(res.ec == std::errc{});
        REQUIRE(back == v);
        REQUIRE(s.find(',') == std::string::npos);
    }
    io::CsvWriter w({"a", "b"});
    w.append_row({"1", "2"});
    REQUIRE(w.text() == "a,b\n1,2\n");
    REQUIRE_THROWS_AS(w.append_row({"only-one"}), ContractError);
}

TEST_CASE("run config parsing") {
    const std::string path = "/tmp/mohawk_config_test.ini";

    SECTION("defaults and overrides") {
        spit(path,
             "# comment\n"
             "[model]\n"
             "d_model = 32\n"
             "n_layers = 2\n"
             "n_heads = 2\n"
             "layer_kinds = attention,ssd\n"
             "\n"
             "[distill]\n"
             "corpus = data/train.tokens\n"
             "stage1_tokens = 5\n"
             "freeze = mlp,embedding\n");
        config::RunConfig rc = config::load_run_config(path);
        REQUIRE(rc.model_cfg.d_model == 32);
        REQUIRE(rc.model_cfg.vocab_size == 256);  // default
        REQUIRE(rc.model_cfg.layer_kinds[0] == model::LayerKind::Attention);
        REQUIRE(rc.model_cfg.layer_kinds[1] == model::LayerKind::Ssd);
        REQUIRE(rc.distill_cfg.stage1_tokens == 5);
        REQUIRE(rc.distill_cfg.stage2_tokens == 200000);  // default
        REQUIRE(rc.distill_cfg.freeze.count(distill::Component::Mlp) == 1);
        REQUIRE(rc.distill_cfg.freeze.count(distill::Component::Embedding) == 1);
        // relative path resolved against the config directory
        REQUIRE(rc.distill_corpus == "/tmp/data/train.tokens");
        // hybrid layout propagates into the distill config
        REQUIRE(rc.distill_cfg.layer_kinds == rc.model_cfg.layer_kinds);
    }

    SECTION("unknown keys are rejected with their line number") {
        spit(path, "[model]\nd_model = 32\nnot_a_key = 1\n");
        try {
            config::load_run_config(path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            REQUIRE(e.line == 3);
            REQUIRE(std::string(e.what()).find("not_a_key") != std::string::npos);
        }
    }

    SECTION("unknown sections and malformed lines are rejected") {
        spit(path, "[nonsense]\nx = 1\n");
        REQUIRE_THROWS_AS(config::load_run_config(path), ParseError);
        spit(path, "[model]\nthis line has no equals\n");
        REQUIRE_THROWS_AS(config::load_run_config(path), ParseError);
        spit(path, "[model]\nd_model = twelve\n");
        REQUIRE_THROWS_AS(config::load_run_config(path), ParseError);
        spit(path, "x = 1\n[model]\n");
        REQUIRE_THROWS_AS(config::load_run_config(path), ParseError);
        spit(path, "[model]\nlayer_kinds = ssd\nn_layers = 2\n");
        REQUIRE_THROWS_AS(config::load_run_config(path), ParseError);
        spit(path, "[distill]\nfreeze = mlp,everything\n");
        REQUIRE_THROWS_AS(config::load_run_config(path), ParseError);
    }

    SECTION("approx and sweep sections") {
        spit(path,
             "[approx]\n"
             "families = toeplitz,ssd\n"
             "state_sizes = 2,4\n"
             "gd_steps = 17\n"
             "gd_lrs = 0.5,0.25\n"
             "[sweep]\n"
             "stage_a = 1\n"
             "stage_a_budgets = 0,100\n"
             "stage_b_budgets = 200\n"
             "seeds = 1,2,3\n");
        config::RunConfig rc = config::load_run_config(path);
        REQUIRE(rc.approx_cfg.families ==
                std::vector<approx::Family>{approx::Family::Toeplitz, approx::Family::Ssd});
        REQUIRE(rc.approx_cfg.state_sizes == std::vector<i64>{2, 4});
        REQUIRE(rc.approx_cfg.gd.steps == 17);
        REQUIRE(rc.approx_cfg.gd.lrs == std::vector<double>{0.5, 0.25});
        REQUIRE(rc.sweep_cfg.sweep.stage_a == 1);
        REQUIRE(rc.sweep_cfg.sweep.stage_a_budgets == std::vector<i64>{0, 100});
        REQUIRE(rc.sweep_cfg.sweep.seeds == std::vector<u64>{1, 2, 3});
    }
}
