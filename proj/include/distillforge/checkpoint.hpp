// A checkpoint directory bundles everything needed to run a model:
// config.json, params.bin (DFT1 container), BPE models and vocabularies.
#pragma once

#include <json.hpp>

#include "distillforge/model.hpp"
#include "distillforge/textproc.hpp"
#include "distillforge/util.hpp"

namespace distillforge {

struct ModelBundle {
    Seq2SeqConfig config;
    Seq2SeqParams<float> params;
    BpeModel src_bpe, trg_bpe;
    Vocabulary src_vocab, trg_vocab;
    uint64_t seed = 0;
};

inline nlohmann::json config_to_json(const Seq2SeqConfig& c) {
    return {
        {"bpe_merges", c.bpe_merges},
        {"embed_size", c.embed_size},
        {"hidden_size", c.hidden_size},
        {"num_layers", c.num_layers},
        {"cell_type", cell_type_name(c.cell_type)},
        {"attention", "dot"},
        {"rnn_dropout_inputs", c.rnn_dropout_inputs},
        {"rnn_dropout_states", c.rnn_dropout_states},
        {"embed_dropout", c.embed_dropout},
        {"max_seq_len", c.max_seq_len},
    };
}

inline Seq2SeqConfig config_from_json(const nlohmann::json& j) {
    Seq2SeqConfig c;
    c.bpe_merges = j.at("bpe_merges").get<size_t>();
    c.embed_size = j.at("embed_size").get<size_t>();
    c.hidden_size = j.at("hidden_size").get<size_t>();
    c.num_layers = j.at("num_layers").get<size_t>();
    c.cell_type = cell_type_from(j.at("cell_type").get<std::string>());
    c.rnn_dropout_inputs = j.at("rnn_dropout_inputs").get<double>();
    c.rnn_dropout_states = j.at("rnn_dropout_states").get<double>();
    c.embed_dropout = j.at("embed_dropout").get<double>();
    c.max_seq_len = j.at("max_seq_len").get<size_t>();
    return c;
}

inline void save_checkpoint(const ModelBundle& m, const std::string& dir,
                            const nlohmann::json& train_section = nlohmann::json()) {
    ensure_dir(dir);
    save_params(m.params, path_join(dir, "params.bin"));
    save_bpe(m.src_bpe, path_join(dir, "bpe.src"));
    save_bpe(m.trg_bpe, path_join(dir, "bpe.trg"));
    save_vocab(m.src_vocab, path_join(dir, "vocab.src"));
    save_vocab(m.trg_vocab, path_join(dir, "vocab.trg"));
    nlohmann::json j = {
        {"model", config_to_json(m.config)},
        {"src_vocab_size", m.src_vocab.size()},
        {"trg_vocab_size", m.trg_vocab.size()},
        {"seed", m.seed},
        {"files",
         {{"params", "params.bin"},
          {"src_bpe", "bpe.src"},
          {"trg_bpe", "bpe.trg"},
          {"src_vocab", "vocab.src"},
          {"trg_vocab", "vocab.trg"}}},
    };
    if (!train_section.is_null()) j["train"] = train_section;
    write_file(path_join(dir, "config.json"), j.dump(2) + "\n");
}

inline ModelBundle load_checkpoint(const std::string& dir) {
    auto j = nlohmann::json::parse(read_file(path_join(dir, "config.json")));
    ModelBundle m;
    m.config = config_from_json(j.at("model"));
    m.seed = j.at("seed").get<uint64_t>();
    const auto& files = j.at("files");
    m.src_bpe = load_bpe(path_join(dir, files.at("src_bpe").get<std::string>()));
    m.trg_bpe = load_bpe(path_join(dir, files.at("trg_bpe").get<std::string>()));
    m.src_vocab = load_vocab(path_join(dir, files.at("src_vocab").get<std::string>()));
    m.trg_vocab = load_vocab(path_join(dir, files.at("trg_vocab").get<std::string>()));
    if (m.src_vocab.size() != j.at("src_vocab_size").get<size_t>() ||
        m.trg_vocab.size() != j.at("trg_vocab_size").get<size_t>())
        throw std::runtime_error("checkpoint vocab size mismatch in " + dir);
    m.params = load_params(m.config, m.src_vocab.size(), m.trg_vocab.size(),
                           path_join(dir, files.at("params").get<std::string>()));
    return m;
}

} // namespace distillforge
