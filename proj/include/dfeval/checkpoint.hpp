#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <json.hpp>

#include "dfeval/detectors.hpp"
#include "dfeval/error.hpp"

namespace dfeval::detectors {

// Archive layout: 8-byte magic, little-endian u64 header length, JSON
// header (config, schedule, trace, parameter table), then each parameter's
// values as little-endian IEEE doubles in table order.
namespace archive {

inline constexpr char kMagic[8] = {'D', 'F', 'E', 'V', 'C', 'K', '0', '1'};

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

inline std::string encode(const Checkpoint& ck) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& t : ck.parameters)
        params.push_back({{"name", t.name}, {"group", std::string(nn::group_name(t.group))}, {"shape", t.shape}});
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& r : ck.trace)
        trace.push_back({{"epoch", r.epoch},
                         {"stage", r.stage},
                         {"train_loss", r.train_loss},
                         {"validation_accuracy", r.validation_accuracy}});
    const nlohmann::json header{{"format", "dfeval-checkpoint"},
                                {"epoch", ck.epoch},
                                {"stage", ck.stage},
                                {"validation_accuracy", ck.validation_accuracy},
                                {"config", to_json(ck.config)},
                                {"schedule", to_json(ck.schedule)},
                                {"data_hash", ck.data_hash},
                                {"trace", trace},
                                {"parameters", params}};
    const std::string h = header.dump();
    std::string out(kMagic, sizeof(kMagic));
    put_u64(out, h.size());
    out += h;
    for (const auto& t : ck.parameters)
        for (double v : t.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline Checkpoint decode(const std::string& bytes, const std::string& what = "checkpoint") {
    auto bad = [&](const std::string& why) { return Error(ErrorKind::IncompatibleWeights, what + ": " + why); };
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw bad("not a checkpoint archive");
    const std::uint64_t hlen = get_u64(bytes, 8);
    if (hlen > bytes.size() - 16) throw bad("truncated header");
    Checkpoint ck;
    std::size_t pos = 16 + hlen;
    try {
        const auto h = nlohmann::json::parse(bytes.substr(16, hlen));
        ck.epoch = h.at("epoch").get<int>();
        ck.stage = h.at("stage").get<int>();
        ck.validation_accuracy = h.at("validation_accuracy").get<double>();
        ck.config = config_from_json(h.at("config"));
        ck.schedule = schedule_from_json(h.at("schedule"));
        ck.data_hash = h.at("data_hash").get<std::string>();
        for (const auto& r : h.at("trace"))
            ck.trace.push_back({r.at("epoch").get<int>(), r.at("stage").get<int>(), r.at("train_loss").get<double>(),
                                r.at("validation_accuracy").get<double>()});
        for (const auto& p : h.at("parameters")) {
            NamedTensor t;
            t.name = p.at("name").get<std::string>();
            t.group = p.at("group").get<std::string>() == "head" ? ParamGroup::Head : ParamGroup::Backbone;
            t.shape = p.at("shape").get<std::vector<int>>();
            const std::size_t n = nn::shape_numel(t.shape);
            if (n > (bytes.size() - pos) / 8) throw bad("truncated parameter blob '" + t.name + "'");
            t.values.resize(n);
            for (std::size_t i = 0; i < n; ++i, pos += 8) t.values[i] = std::bit_cast<double>(get_u64(bytes, pos));
            ck.parameters.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw bad(std::string("bad header: ") + e.what());
    }
    if (pos != bytes.size()) throw bad("trailing bytes after parameter blobs");
    return ck;
}

} // namespace archive

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoError, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Write via a temporary file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error(ErrorKind::IoError, "cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorKind::IoError, "short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    write_file_atomic(path, archive::encode(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return archive::decode(read_file(path), path.string());
}

/// `random-init`, or the parameters of a checkpoint archive.
inline WeightSource load_weight_source(const std::string& spec) {
    if (spec == "random-init") return WeightSource::random_init();
    if (!std::filesystem::exists(spec))
        throw Error(ErrorKind::IncompatibleWeights, "weight source '" + spec + "' does not exist");
    return WeightSource::from_tensors(load_checkpoint(spec).parameters);
}

/// Rebuild a model from a checkpoint, in eval mode.
inline std::unique_ptr<DetectorModel> model_from_checkpoint(const Checkpoint& ck) {
    auto m = make_model(ck.config);
    m->restore(ck.parameters);
    m->set_mode(Mode::Eval);
    return m;
}

struct ModelKey {
    std::string database;
    RegionKind region = RegionKind::Face;
    Architecture architecture = Architecture::TinyCnn;

    std::string str() const {
        return database + "/" + std::string(region_name(region)) + "/" + std::string(architecture_name(architecture));
    }
    static ModelKey of(const DetectorConfig& c) { return {c.database, c.region, c.architecture}; }
};

/// Exclusive advisory lock on a file, released on destruction.
class FileLock {
public:
    explicit FileLock(const std::filesystem::path& path) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
        if (fd_ < 0) throw Error(ErrorKind::IoError, "cannot open lock file " + path.string());
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            throw Error(ErrorKind::IoError, "cannot lock " + path.string());
        }
    }
    ~FileLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;

private:
    int fd_ = -1;
};

/// One checkpoint per (database, region, architecture), stored at
/// `<root>/<database>/<region>/<architecture>/checkpoint.dfck`.
class ModelRegistry {
public:
    static constexpr const char* kEnvVar = "DFEVAL_REGISTRY";

    explicit ModelRegistry(std::filesystem::path root) : root_(std::move(root)) {}

    /// $DFEVAL_REGISTRY if set, otherwise `fallback`.
    static ModelRegistry from_env(const std::filesystem::path& fallback) {
        const char* env = std::getenv(kEnvVar);
        return ModelRegistry(env && *env ? std::filesystem::path(env) : fallback);
    }

    const std::filesystem::path& root() const { return root_; }

    std::filesystem::path path_of(const ModelKey& key) const {
        return root_ / key.database / std::string(region_name(key.region)) /
               std::string(architecture_name(key.architecture)) / "checkpoint.dfck";
    }

    bool contains(const ModelKey& key) const { return std::filesystem::exists(path_of(key)); }

    /// Rejects an existing key unless `overwrite`; storing identical bytes
    /// again is a no-op.
    void store(const ModelKey& key, const Checkpoint& ck, bool overwrite = false) const {
        FileLock lock(root_ / ".registry.lock");
        const auto path = path_of(key);
        const std::string bytes = archive::encode(ck);
        if (std::filesystem::exists(path) && !overwrite) {
            if (read_file(path) == bytes) return;
            throw Error(ErrorKind::RegistryConflict,
                        "a model is already registered under " + key.str() + " (use --overwrite to replace it)");
        }
        write_file_atomic(path, bytes);
    }

    Checkpoint load(const ModelKey& key) const {
        const auto path = path_of(key);
        if (!std::filesystem::exists(path))
            throw Error(ErrorKind::MissingPrerequisite, "no trained model for " + key.str() + " (expected " +
                                                            path.string() + "; run `train` first)");
        return load_checkpoint(path);
    }

private:
    std::filesystem::path root_;
};

} // namespace dfeval::detectors
