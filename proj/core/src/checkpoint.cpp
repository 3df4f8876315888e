// SPDX-License-Identifier: Apache-2.0
#include "moeforge/checkpoint.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>
#include <zlib.h>

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "moeforge/common.hpp"

namespace moeforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint32_t crc32_of(const std::vector<double>& data) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data()),
                static_cast<uInt>(data.size() * sizeof(double)));
    return static_cast<std::uint32_t>(crc);
}

json arch_to_json(const ArchConfig& a) {
    return json{{"vocab", a.vocab},
                {"d_model", a.d_model},
                {"ffn_dim", a.ffn_dim},
                {"enc_layers", a.enc_layers},
                {"dec_layers", a.dec_layers},
                {"heads", a.heads},
                {"num_experts", a.num_experts},
                {"moe_every", a.moe_every},
                {"tied_embeddings", a.tied_embeddings}};
}

ArchConfig arch_from_json(const json& j) {
    ArchConfig a;
    a.vocab = j.at("vocab").get<std::int64_t>();
    a.d_model = j.at("d_model").get<std::int64_t>();
    a.ffn_dim = j.at("ffn_dim").get<std::int64_t>();
    a.enc_layers = j.at("enc_layers").get<int>();
    a.dec_layers = j.at("dec_layers").get<int>();
    a.heads = j.at("heads").get<int>();
    a.num_experts = j.at("num_experts").get<int>();
    a.moe_every = j.at("moe_every").get<int>();
    a.tied_embeddings = j.at("tied_embeddings").get<bool>();
    return a;
}

const char* role_name(TensorRole role) {
    switch (role) {
    case TensorRole::kNonExpert: return "non_expert";
    case TensorRole::kExpert: return "expert";
    case TensorRole::kGate: return "gate";
    }
    return "non_expert";
}

TensorRole role_from_name(const std::string& s) {
    if (s == "non_expert") return TensorRole::kNonExpert;
    if (s == "expert") return TensorRole::kExpert;
    if (s == "gate") return TensorRole::kGate;
    throw CheckpointError("manifest: unknown role tag " + s);
}

/// Scoped flock on <dir>/.lock.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) {
        fd_ = ::open((dir / ".lock").c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ < 0) {
            throw CheckpointError("cannot open lock file in " + dir.string());
        }
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            throw CheckpointError("cannot lock checkpoint directory " + dir.string());
        }
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    int fd_ = -1;
};

struct ManifestRecord {
    std::string name;
    RoleTag tag;
    std::vector<std::int64_t> shape;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
    std::uint32_t crc = 0;
};

struct Manifest {
    ArchConfig arch;
    std::uint64_t blob_size = 0;
    std::vector<ManifestRecord> records;
};

Manifest read_manifest(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) {
        throw CheckpointError("cannot open manifest in " + dir.string());
    }
    json j = json::parse(in);
    const std::string version = j.at("version").get<std::string>();
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version mismatch: found " + version);
    }
    Manifest m;
    m.arch = arch_from_json(j.at("arch"));
    m.blob_size = j.at("blob_size").get<std::uint64_t>();
    for (const json& rec : j.at("tensors")) {
        ManifestRecord r;
        r.name = rec.at("name").get<std::string>();
        r.tag.role = role_from_name(rec.at("role").get<std::string>());
        if (rec.contains("layer")) r.tag.moe_layer = rec.at("layer").get<int>();
        if (rec.contains("expert")) r.tag.expert = rec.at("expert").get<int>();
        r.shape = rec.at("shape").get<std::vector<std::int64_t>>();
        r.offset = rec.at("offset").get<std::uint64_t>();
        r.length = rec.at("length").get<std::uint64_t>();
        r.crc = rec.at("crc32").get<std::uint32_t>();
        const std::string dtype = rec.at("dtype").get<std::string>();
        if (dtype != "f64") {
            throw CheckpointError("manifest: unsupported dtype " + dtype);
        }
        m.records.push_back(std::move(r));
    }
    return m;
}

} // namespace

const TensorRecord& Checkpoint::at(const std::string& name) const {
    for (const TensorRecord& r : tensors) {
        if (r.name == name) return r;
    }
    throw CheckpointError("checkpoint: no tensor named " + name);
}

TensorRecord& Checkpoint::at(const std::string& name) {
    for (TensorRecord& r : tensors) {
        if (r.name == name) return r;
    }
    throw CheckpointError("checkpoint: no tensor named " + name);
}

Checkpoint to_checkpoint(const ModelParams& model) {
    Checkpoint ckpt;
    ckpt.arch = model.arch;
    ckpt.tensors.reserve(model.specs.size());
    for (std::size_t i = 0; i < model.specs.size(); ++i) {
        const TensorSpec& spec = model.specs[i];
        const auto view = model.tensors[i].data();
        ckpt.tensors.push_back(
            {spec.name, spec.tag, spec.shape, std::vector<double>(view.begin(), view.end())});
    }
    return ckpt;
}

ModelParams model_from_checkpoint(const Checkpoint& ckpt) {
    ModelParams model;
    model.arch = ckpt.arch;
    model.specs = enumerate_param_specs(ckpt.arch);
    if (model.specs.size() != ckpt.tensors.size()) {
        throw CheckpointError("checkpoint: tensor count does not match architecture");
    }
    model.tensors.reserve(model.specs.size());
    for (std::size_t i = 0; i < model.specs.size(); ++i) {
        const TensorSpec& spec = model.specs[i];
        const TensorRecord& rec = ckpt.tensors[i];
        if (rec.name != spec.name || rec.shape != spec.shape) {
            throw CheckpointError("checkpoint: record " + rec.name +
                                  " does not match architecture layout");
        }
        model.tensors.push_back(Tensor::leaf(rec.shape, rec.data, true));
        model.index.emplace(spec.name, i);
    }
    return model;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
    fs::create_directories(dir);
    DirLock lock(dir);

    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const TensorRecord& rec : ckpt.tensors) {
        if (shape_numel(rec.shape) != static_cast<std::int64_t>(rec.data.size())) {
            throw CheckpointError("save: record " + rec.name + " data does not match shape");
        }
        json j{{"name", rec.name},
               {"role", role_name(rec.tag.role)},
               {"shape", rec.shape},
               {"dtype", "f64"},
               {"offset", offset},
               {"length", rec.data.size() * sizeof(double)},
               {"crc32", crc32_of(rec.data)}};
        if (rec.tag.role != TensorRole::kNonExpert) {
            j["layer"] = rec.tag.moe_layer;
        }
        if (rec.tag.role == TensorRole::kExpert) {
            j["expert"] = rec.tag.expert;
        }
        tensors.push_back(std::move(j));
        offset += rec.data.size() * sizeof(double);
    }
    json manifest{{"version", kCheckpointVersion},
                  {"arch", arch_to_json(ckpt.arch)},
                  {"blob_size", offset},
                  {"tensors", std::move(tensors)}};

    const fs::path blob_tmp = dir / "tensors.bin.tmp";
    {
        std::ofstream out(blob_tmp, std::ios::binary | std::ios::trunc);
        for (const TensorRecord& rec : ckpt.tensors) {
            out.write(reinterpret_cast<const char*>(rec.data.data()),
                      static_cast<std::streamsize>(rec.data.size() * sizeof(double)));
        }
        if (!out) {
            throw CheckpointError("save: failed writing blob to " + dir.string());
        }
    }
    const fs::path manifest_tmp = dir / "manifest.json.tmp";
    {
        std::ofstream out(manifest_tmp, std::ios::trunc);
        out << manifest.dump(2) << "\n";
        if (!out) {
            throw CheckpointError("save: failed writing manifest to " + dir.string());
        }
    }
    fs::rename(blob_tmp, dir / "tensors.bin");
    fs::rename(manifest_tmp, dir / "manifest.json");
}

void save_checkpoint(const ModelParams& model, const fs::path& dir) {
    save_checkpoint(to_checkpoint(model), dir);
}

Checkpoint load_checkpoint(const fs::path& dir) {
    Manifest m = read_manifest(dir);
    std::ifstream blob(dir / "tensors.bin", std::ios::binary);
    if (!blob) {
        throw CheckpointError("cannot open blob in " + dir.string());
    }
    blob.seekg(0, std::ios::end);
    const std::uint64_t size = static_cast<std::uint64_t>(blob.tellg());
    if (size != m.blob_size) {
        throw CheckpointError("blob truncated or oversized: expected " +
                              std::to_string(m.blob_size) + " bytes, found " +
                              std::to_string(size));
    }
    Checkpoint ckpt;
    ckpt.arch = m.arch;
    for (const ManifestRecord& rec : m.records) {
        const std::uint64_t count = rec.length / sizeof(double);
        if (rec.length % sizeof(double) != 0 ||
            static_cast<std::int64_t>(count) != shape_numel(rec.shape)) {
            throw CheckpointError("record " + rec.name + " length does not match shape");
        }
        std::vector<double> data(count);
        blob.seekg(static_cast<std::streamoff>(rec.offset));
        blob.read(reinterpret_cast<char*>(data.data()),
                  static_cast<std::streamsize>(rec.length));
        if (!blob) {
            throw CheckpointError("blob truncated while reading " + rec.name);
        }
        if (crc32_of(data) != rec.crc) {
            throw CheckpointError("checksum failure on tensor " + rec.name);
        }
        ckpt.tensors.push_back({rec.name, rec.tag, rec.shape, std::move(data)});
    }
    return ckpt;
}

ValidationReport validate_checkpoint(const fs::path& dir) {
    ValidationReport report;
    auto add = [&](const std::string& code, const std::string& message) {
        report.violations.push_back({code, message});
    };

    Manifest m;
    try {
        m = read_manifest(dir);
    } catch (const std::exception& e) {
        add("manifest", e.what());
        return report;
    }

    std::vector<std::string> names;
    for (const ManifestRecord& rec : m.records) {
        names.push_back(rec.name);
        if (rec.tag.role == TensorRole::kExpert &&
            (rec.tag.moe_layer < 0 || rec.tag.expert < 0)) {
            add("role_tag", "expert record " + rec.name + " missing layer/expert index");
        }
        if (rec.tag.role == TensorRole::kGate && rec.tag.moe_layer < 0) {
            add("role_tag", "gate record " + rec.name + " missing layer index");
        }
        if (rec.length % sizeof(double) != 0 ||
            static_cast<std::int64_t>(rec.length / sizeof(double)) != shape_numel(rec.shape)) {
            add("length", "record " + rec.name + " length does not match shape");
        }
    }
    std::sort(names.begin(), names.end());
    for (std::size_t i = 1; i < names.size(); ++i) {
        if (names[i] == names[i - 1]) {
            add("names", "duplicate tensor name " + names[i]);
        }
    }

    auto sorted = m.records;
    std::sort(sorted.begin(), sorted.end(),
              [](const ManifestRecord& a, const ManifestRecord& b) { return a.offset < b.offset; });
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        total += sorted[i].length;
        if (i > 0 && sorted[i].offset < sorted[i - 1].offset + sorted[i - 1].length) {
            add("overlap", "records " + sorted[i - 1].name + " and " + sorted[i].name +
                               " overlap in the blob");
        }
    }
    if (total != m.blob_size) {
        add("blob_size", "sum of record lengths does not equal blob size");
    }

    std::ifstream blob(dir / "tensors.bin", std::ios::binary);
    if (!blob) {
        add("blob", "cannot open tensors.bin");
        return report;
    }
    blob.seekg(0, std::ios::end);
    if (static_cast<std::uint64_t>(blob.tellg()) != m.blob_size) {
        add("blob", "blob file size does not match manifest");
        return report;
    }
    for (const ManifestRecord& rec : m.records) {
        std::vector<double> data(rec.length / sizeof(double));
        blob.seekg(static_cast<std::streamoff>(rec.offset));
        blob.read(reinterpret_cast<char*>(data.data()),
                  static_cast<std::streamsize>(rec.length));
        if (!blob) {
            add("blob", "short read on " + rec.name);
            return report;
        }
        if (crc32_of(data) != rec.crc) {
            add("checksum", "checksum failure on " + rec.name);
        }
    }
    return report;
}

} // namespace moeforge
