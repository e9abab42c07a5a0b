#include "tabgrade/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "tabgrade/io.hpp"

namespace tabgrade {

namespace {

void append_le(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
        out.push_back(static_cast<char>(bits & 0xff));
        bits >>= 8;
    }
}

double read_le(const char* p) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) {
        bits = (bits << 8) | static_cast<unsigned char>(p[b]);
    }
    return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::string blob;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : ckpt.model.params) {
        const std::size_t offset = blob.size();
        for (Eigen::Index i = 0; i < t.value.size(); ++i) {
            append_le(blob, t.value.data()[i]);
        }
        tensors.push_back({{"name", t.name},
                           {"shape", {t.value.rows(), t.value.cols()}},
                           {"dtype", "f64"},
                           {"offset", offset},
                           {"nbytes", blob.size() - offset},
                           {"graph", t.graph}});
    }
    nlohmann::json manifest = {{"version", kCheckpointVersion},
                               {"config", ckpt.model.config.to_json()},
                               {"mode", to_string(ckpt.mode)},
                               {"schema", schema_to_json(ckpt.schema)},
                               {"vocabulary", ckpt.vocab.to_json()},
                               {"vocab_hash", ckpt.vocab.hash()},
                               {"tensors", tensors},
                               {"blob_bytes", blob.size()},
                               {"blob_digest", hex_digest(fnv1a64(blob))}};

    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    write_file_atomic(tmp / "manifest.json", manifest.dump(2) + "\n");
    write_file_atomic(tmp / "tensors.bin", blob);
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    std::string blob;
    try {
        manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
        blob = read_file(dir / "tensors.bin");
    } catch (const std::exception& e) {
        throw CheckpointError("cannot read checkpoint " + dir.string() + ": " + e.what());
    }
    Checkpoint ckpt;
    try {
        const auto version = manifest.at("version").get<std::string>();
        if (version != kCheckpointVersion) {
            throw CheckpointError("checkpoint version mismatch: found '" + version + "', expected '" +
                                  kCheckpointVersion + "'");
        }
        ckpt.model.config = ModelConfig::from_json(manifest.at("config"));
        ckpt.mode = train_mode_from_string(manifest.at("mode").get<std::string>());
        ckpt.schema = schema_from_json(manifest.at("schema"));
        ckpt.vocab = Vocabulary::from_json(manifest.at("vocabulary"));
        if (ckpt.vocab.hash() != manifest.at("vocab_hash").get<std::string>()) {
            throw CheckpointError("vocabulary hash mismatch");
        }
        if (ckpt.vocab.size() != ckpt.model.config.vocab_size) {
            throw CheckpointError("vocabulary size does not match the model config");
        }
        const auto expected_bytes = manifest.at("blob_bytes").get<std::size_t>();
        if (blob.size() < expected_bytes) {
            throw CheckpointError("truncated tensor blob: " + std::to_string(blob.size()) + " of " +
                                  std::to_string(expected_bytes) + " bytes");
        }
        if (blob.size() != expected_bytes) {
            throw CheckpointError("tensor blob has trailing bytes");
        }
        if (hex_digest(fnv1a64(blob)) != manifest.at("blob_digest").get<std::string>()) {
            throw CheckpointError("tensor blob digest mismatch");
        }

        ckpt.model.params = make_parameter_shapes(ckpt.model.config);
        ckpt.model.index = build_index(ckpt.model.config);
        const auto& entries = manifest.at("tensors");
        if (entries.size() != ckpt.model.params.size()) {
            throw CheckpointError("tensor count mismatch");
        }
        for (std::size_t i = 0; i < entries.size(); ++i) {
            auto& t = ckpt.model.params[i];
            const auto& e = entries[i];
            const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
            if (e.at("name").get<std::string>() != t.name || shape.size() != 2 || shape[0] != t.value.rows() ||
                shape[1] != t.value.cols()) {
                throw CheckpointError("tensor '" + t.name + "' shape or name mismatch");
            }
            const auto offset = e.at("offset").get<std::size_t>();
            const auto nbytes = e.at("nbytes").get<std::size_t>();
            if (nbytes != static_cast<std::size_t>(t.value.size()) * 8 || offset + nbytes > blob.size()) {
                throw CheckpointError("tensor '" + t.name + "' extends past the blob");
            }
            for (Eigen::Index k = 0; k < t.value.size(); ++k) {
                t.value.data()[k] = read_le(blob.data() + offset + static_cast<std::size_t>(k) * 8);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
    } catch (const DataError& e) {
        throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
    }
    return ckpt;
}

}  // namespace tabgrade
