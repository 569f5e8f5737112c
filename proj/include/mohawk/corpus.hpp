#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "mohawk/rng.hpp"

namespace mohawk::corpus {

// Synthetic corpus over a 256-symbol vocabulary mixing long-range structure
// (nested brackets whose closer is determined by the stack) with local
// structure (a doubly-stochastic Markov walk over the background symbols).
//
// Tokens 0..7 open brackets, 8..15 close them, 16..255 are background.
struct GrammarSpec {
    i64 vocab_size = 256;
    i64 bracket_types = 8;
    i64 background_symbols = 240;
    double p_open = 0.15;   // when depth < max_depth
    double p_close = 0.20;  // when depth > 0
    i64 max_depth = 20;
    i64 burn_in = 10000;
};

inline GrammarSpec default_grammar() { return {}; }

// Stationary probability that a step emits an open (= close) bracket.
inline double bracket_emission_prob(const GrammarSpec& g) {
    const double r = g.p_open / g.p_close;
    const i64 d = g.max_depth;
    double pi0;
    if (std::abs(r - 1.0) < 1e-15) {
        pi0 = 1.0 / static_cast<double>(d + 1);
    } else {
        pi0 = (1.0 - r) / (1.0 - std::pow(r, static_cast<double>(d + 1)));
    }
    const double pid = pi0 * std::pow(r, static_cast<double>(d));
    return g.p_open * (1.0 - pid);
}

// Exact unigram entropy (nats) of the stationary token distribution: bracket
// types are exchangeable and the background kernel is doubly stochastic, so
// within each class the distribution is uniform.
inline double analytic_unigram_entropy(const GrammarSpec& g = default_grammar()) {
    const double po = bracket_emission_prob(g);
    const double pb = 1.0 - 2.0 * po;
    const double kb = static_cast<double>(g.bracket_types);
    const double ks = static_cast<double>(g.background_symbols);
    return -2.0 * po * std::log(po / kb) - pb * std::log(pb / ks);
}

inline double analytic_unigram_perplexity(const GrammarSpec& g = default_grammar()) {
    return std::exp(analytic_unigram_entropy(g));
}

inline std::vector<uint16_t> generate(u64 seed, i64 size,
                                      const GrammarSpec& g = default_grammar()) {
    check(size >= 1, "corpus: size must be >= 1");
    Rng rng = Rng(seed).split("corpus");
    std::vector<i64> stack;
    i64 markov = rng.uniform_int(g.background_symbols);
    std::vector<uint16_t> out;
    out.reserve(static_cast<size_t>(size));
    const i64 total = g.burn_in + size;
    for (i64 step = 0; step < total; ++step) {
        const double r = rng.uniform();
        uint16_t tok;
        if (static_cast<i64>(stack.size()) < g.max_depth && r < g.p_open) {
            i64 type = rng.uniform_int(g.bracket_types);
            stack.push_back(type);
            tok = static_cast<uint16_t>(type);
        } else if (!stack.empty() && r >= g.p_open && r < g.p_open + g.p_close) {
            i64 type = stack.back();
            stack.pop_back();
            tok = static_cast<uint16_t>(g.bracket_types + type);
        } else {
            const double r2 = rng.uniform();
            if (r2 < 0.5)
                markov = (markov + 1) % g.background_symbols;
            else if (r2 < 0.8)
                markov = (7 * markov + 3) % g.background_symbols;
            else
                markov = rng.uniform_int(g.background_symbols);
            tok = static_cast<uint16_t>(2 * g.bracket_types + markov);
        }
        if (step >= g.burn_in) out.push_back(tok);
    }
    return out;
}

// u16 little-endian token stream
inline void write_tokens(const std::string& path, const std::vector<uint16_t>& tokens) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("corpus: cannot open for writing: " + path);
    os.write(reinterpret_cast<const char*>(tokens.data()),
             static_cast<std::streamsize>(tokens.size() * 2));
    if (!os) throw IoError("corpus: write failed: " + path);
}

inline std::vector<uint16_t> read_tokens(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw IoError("corpus: cannot open: " + path);
    std::streamsize bytes = is.tellg();
    check_input(bytes % 2 == 0, "corpus: odd file size, not a u16 stream");
    is.seekg(0);
    std::vector<uint16_t> tokens(static_cast<size_t>(bytes / 2));
    is.read(reinterpret_cast<char*>(tokens.data()), bytes);
    if (!is) throw IoError("corpus: read failed: " + path);
    return tokens;
}

// exp of the plug-in entropy of the file's empirical unigram distribution
inline double empirical_unigram_perplexity(const std::vector<uint16_t>& tokens,
                                           i64 vocab_size = 256) {
    check(!tokens.empty(), "corpus: empty token stream");
    std::vector<i64> counts(static_cast<size_t>(vocab_size), 0);
    for (uint16_t t : tokens) {
        check_input(t < vocab_size, "corpus: token out of range");
        counts[t]++;
    }
    const double n = static_cast<double>(tokens.size());
    double h = 0.0;
    for (i64 c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return std::exp(h);
}

// Add-one-smoothed unigram fit on `train`, evaluated on `eval`.
inline double unigram_baseline_perplexity(const std::vector<uint16_t>& train,
                                          const std::vector<uint16_t>& eval_tokens,
                                          i64 vocab_size = 256) {
    check(!train.empty() && !eval_tokens.empty(), "corpus: empty split");
    std::vector<i64> counts(static_cast<size_t>(vocab_size), 1);
    for (uint16_t t : train) counts[t]++;
    const double total = static_cast<double>(train.size() + static_cast<size_t>(vocab_size));
    double nll = 0.0;
    for (uint16_t t : eval_tokens) nll -= std::log(static_cast<double>(counts[t]) / total);
    return std::exp(nll / static_cast<double>(eval_tokens.size()));
}

}  // namespace mohawk::corpus
