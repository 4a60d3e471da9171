#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "neti/common.hpp"
#include "neti/graph.hpp"
#include "neti/rng.hpp"
#include "neti/tensor.hpp"

namespace neti {

// Word-level vocabulary for the templated caption grammar. "S*" is the
// concept placeholder; "<pad>" fills unused context positions.
struct Vocab {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> index;
    int pad_id = -1;
    int placeholder_id = -1;

    int size() const { return static_cast<int>(tokens.size()); }

    int id_of(const std::string& word) const {
        auto it = index.find(word);
        if (it == index.end()) {
            fail("unknown word '", word, "' (not in vocabulary)");
        }
        return it->second;
    }

    bool contains(const std::string& word) const { return index.count(word) > 0; }

    static Vocab from_tokens(std::vector<std::string> toks) {
        Vocab v;
        v.tokens = std::move(toks);
        for (int i = 0; i < v.size(); ++i) {
            require(v.index.emplace(v.tokens[i], i).second, "duplicate vocabulary token '",
                    v.tokens[i], "'");
        }
        v.pad_id = v.id_of("<pad>");
        v.placeholder_id = v.id_of("S*");
        return v;
    }

    // Fixed grammar vocabulary: fillers + 4 colors x 4 shapes x 4 backgrounds.
    static Vocab builtin() {
        return from_tokens({"<pad>", "S*",     "a",      "an",    "the",    "photo",  "image",
                            "of",    "on",     "in",     "background",      "object", "shape",
                            "red",   "green",  "blue",   "yellow", "circle", "square",
                            "triangle", "cross", "white", "black",  "gray",   "tan"});
    }

    std::string to_text() const {
        std::string out;
        for (const std::string& t : tokens) {
            out += t;
            out += '\n';
        }
        return out;
    }

    static Vocab from_text(const std::string& text) {
        std::vector<std::string> toks;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty()) {
                toks.push_back(line);
            }
        }
        return from_tokens(std::move(toks));
    }
};

struct TokenizedPrompt {
    std::vector<int> ids; // length = context size, padded
    std::optional<int> placeholder_pos;
};

// Whitespace tokenizer onto a fixed-length id sequence. Every word must be
// in the vocabulary and "S*" may appear at most once.
inline TokenizedPrompt tokenize(const std::string& prompt, const Vocab& vocab, int context) {
    TokenizedPrompt out;
    out.ids.assign(context, vocab.pad_id);
    std::istringstream is(prompt);
    std::string word;
    int pos = 0;
    while (is >> word) {
        if (pos >= context) {
            fail("prompt has more than ", context, " words: '", prompt, "'");
        }
        const int id = vocab.id_of(word);
        if (id == vocab.placeholder_id) {
            if (out.placeholder_pos) {
                fail("prompt contains multiple 'S*' placeholders: '", prompt, "'");
            }
            out.placeholder_pos = pos;
        }
        out.ids[pos++] = id;
    }
    return out;
}

struct TextEncoderConfig {
    int context = 12; // N
    int dim = 64;     // D
    int blocks = 2;
    int ffn_mult = 2;

    void validate() const {
        require(context > 0 && dim > 0 && blocks > 0 && ffn_mult > 0,
                "text encoder config: dimensions must be positive");
    }
};

// Small causal transformer over the token table: per block, pre-LN
// single-head self-attention and a pre-LN FFN, then a final LayerNorm.
// Trainable only during generator pretraining; frozen afterwards.
template <typename T>
struct TextEncoderParams {
    TextEncoderConfig cfg;
    Tensor<T> table; // V x D token embeddings (the P space)
    Tensor<T> pos;   // N x D learned positions

    struct Block {
        Tensor<T> ln1_g, ln1_b;
        Tensor<T> wq, wk, wv, wo; // D x D, single head
        Tensor<T> ln2_g, ln2_b;
        Tensor<T> ffn1_w, ffn1_b; // D x mult*D
        Tensor<T> ffn2_w, ffn2_b; // mult*D x D
    };
    std::vector<Block> blocks;
    Tensor<T> lnf_g, lnf_b;
    Tensor<T> causal_mask; // N x N additive mask, 0 on/below diagonal

    std::vector<Tensor<T>*> trainable() {
        std::vector<Tensor<T>*> out{&table, &pos};
        for (Block& b : blocks) {
            out.insert(out.end(), {&b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g,
                                   &b.ln2_b, &b.ffn1_w, &b.ffn1_b, &b.ffn2_w, &b.ffn2_b});
        }
        out.push_back(&lnf_g);
        out.push_back(&lnf_b);
        return out;
    }

    void set_requires_grad(bool on) {
        for (Tensor<T>* t : trainable()) {
            t->requires_grad = on;
        }
    }
};

template <typename T>
TextEncoderParams<T> init_textenc(const TextEncoderConfig& cfg, int vocab_size, uint64_t seed) {
    cfg.validate();
    TextEncoderParams<T> p;
    p.cfg = cfg;
    Rng rng(seed);

    // token rows: random direction, norm in [0.9, 1.1] so the table starts
    // as a narrow norm band around 1
    p.table = Tensor<T>(vocab_size, cfg.dim);
    for (int i = 0; i < vocab_size; ++i) {
        std::vector<double> g(cfg.dim);
        double n = 0.0;
        for (double& x : g) {
            x = rng.normal();
            n += x * x;
        }
        n = std::sqrt(n);
        const double target = 1.0 + 0.1 * rng.uniform(-1.0, 1.0);
        for (int j = 0; j < cfg.dim; ++j) {
            p.table.at(i, j) = static_cast<T>(g[j] / n * target);
        }
    }

    p.pos = Tensor<T>::randn(cfg.context, cfg.dim, rng, 0.02);

    auto winit = [&](int rows, int cols) {
        const double limit = std::sqrt(6.0 / rows);
        return Tensor<T>::rand_uniform(rows, cols, rng, -limit, limit);
    };
    p.blocks.resize(cfg.blocks);
    for (auto& b : p.blocks) {
        b.ln1_g = Tensor<T>::full(1, cfg.dim, T(1));
        b.ln1_b = Tensor<T>::zeros(1, cfg.dim);
        b.wq = winit(cfg.dim, cfg.dim);
        b.wk = winit(cfg.dim, cfg.dim);
        b.wv = winit(cfg.dim, cfg.dim);
        b.wo = winit(cfg.dim, cfg.dim);
        b.ln2_g = Tensor<T>::full(1, cfg.dim, T(1));
        b.ln2_b = Tensor<T>::zeros(1, cfg.dim);
        b.ffn1_w = winit(cfg.dim, cfg.ffn_mult * cfg.dim);
        b.ffn1_b = Tensor<T>::zeros(1, cfg.ffn_mult * cfg.dim);
        b.ffn2_w = winit(cfg.ffn_mult * cfg.dim, cfg.dim);
        b.ffn2_b = Tensor<T>::zeros(1, cfg.dim);
    }
    p.lnf_g = Tensor<T>::full(1, cfg.dim, T(1));
    p.lnf_b = Tensor<T>::zeros(1, cfg.dim);

    p.causal_mask = Tensor<T>::zeros(cfg.context, cfg.context);
    for (int i = 0; i < cfg.context; ++i) {
        for (int j = i + 1; j < cfg.context; ++j) {
            p.causal_mask.at(i, j) = T(-1e9);
        }
    }
    return p;
}

// Encode a tokenized prompt to the N x D conditioning sequence. When the
// prompt has a placeholder, `injected` replaces that row of the table
// lookup before the encoder runs (and must be omitted otherwise).
template <typename T>
Value encode_prompt(Tape<T>& tape, TextEncoderParams<T>& p, const TokenizedPrompt& toks,
                    std::optional<Value> injected = std::nullopt) {
    require(static_cast<int>(toks.ids.size()) == p.cfg.context, "encode_prompt: prompt has ",
            toks.ids.size(), " ids, context is ", p.cfg.context);
    require(toks.placeholder_pos.has_value() == injected.has_value(),
            "encode_prompt: injected vector must be present exactly when the prompt has S*");
    if (injected) {
        const Tensor<T>& iv = tape.val(*injected);
        require(iv.rows == 1 && iv.cols == p.cfg.dim, "encode_prompt: injected vector is ",
                iv.rows, "x", iv.cols, ", expected 1x", p.cfg.dim);
    }

    Value table = tape.leaf(p.table);
    std::vector<Value> rows;
    rows.reserve(toks.ids.size());
    for (size_t i = 0; i < toks.ids.size(); ++i) {
        if (toks.placeholder_pos && static_cast<int>(i) == *toks.placeholder_pos) {
            rows.push_back(*injected);
        } else {
            rows.push_back(tape.slice_rows(table, toks.ids[i], 1));
        }
    }
    Value x = tape.concat_rows(rows);
    x = tape.add(x, tape.leaf(p.pos));

    const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(p.cfg.dim)));
    for (auto& b : p.blocks) {
        Value xn = tape.layer_norm(x);
        xn = tape.add(tape.mul(xn, tape.leaf(b.ln1_g)), tape.leaf(b.ln1_b));
        Value q = tape.matmul(xn, tape.leaf(b.wq));
        Value k = tape.matmul(xn, tape.leaf(b.wk));
        Value v = tape.matmul(xn, tape.leaf(b.wv));
        Value scores = tape.mul(tape.matmul(q, tape.transpose(k)),
                                tape.constant_scalar(inv_sqrt_d));
        scores = tape.add(scores, tape.leaf(p.causal_mask));
        Value attn = tape.softmax_rows(scores);
        x = tape.add(x, tape.matmul(tape.matmul(attn, v), tape.leaf(b.wo)));

        Value yn = tape.layer_norm(x);
        yn = tape.add(tape.mul(yn, tape.leaf(b.ln2_g)), tape.leaf(b.ln2_b));
        Value f = tape.leaky_relu(tape.add(tape.matmul(yn, tape.leaf(b.ffn1_w)),
                                           tape.leaf(b.ffn1_b)));
        x = tape.add(x, tape.add(tape.matmul(f, tape.leaf(b.ffn2_w)), tape.leaf(b.ffn2_b)));
    }
    Value out = tape.layer_norm(x);
    return tape.add(tape.mul(out, tape.leaf(p.lnf_g)), tape.leaf(p.lnf_b));
}

// Textual bypass: add a scaled unit-direction of v_pass onto the encoded
// placeholder row. alpha = 0 returns the input sequence untouched (the
// same node, hence bitwise unchanged). Only the value pathway of the
// cross-attention ever sees this output; keys keep the base sequence.
template <typename T>
Value mix_bypass(Tape<T>& tape, Value seq, int pos, Value v_pass, double alpha) {
    // Plain int copy: references into the tape dangle once new ops grow it.
    const int seq_rows = tape.val(seq).rows;
    require(pos >= 0 && pos < seq_rows, "mix_bypass: position ", pos, " outside sequence of ",
            seq_rows, " rows");
    if (tape.val(v_pass).norm() == 0.0) {
        fail("mix_bypass: zero-norm bypass vector");
    }
    if (alpha == 0.0) {
        return seq;
    }
    Value row = tape.slice_rows(seq, pos, 1);
    if (tape.val(row).norm() == 0.0) {
        fail("mix_bypass: encoded placeholder row has zero norm");
    }
    Value unit = tape.scale(v_pass, tape.l2_norm(v_pass), /*divide=*/true);
    Value term = tape.scale(unit, tape.l2_norm(row), /*divide=*/false);
    term = tape.scale(term, tape.constant_scalar(static_cast<T>(alpha)), /*divide=*/false);
    Value mixed = tape.add(row, term);

    std::vector<Value> parts;
    if (pos > 0) {
        parts.push_back(tape.slice_rows(seq, 0, pos));
    }
    parts.push_back(mixed);
    if (pos + 1 < seq_rows) {
        parts.push_back(tape.slice_rows(seq, pos + 1, seq_rows - pos - 1));
    }
    return tape.concat_rows(parts);
}

} // namespace neti
