#include "totem/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace totem {

namespace {

constexpr char kMagic[4] = {'T', 'O', 'T', 'M'};
constexpr std::uint32_t kVersion = 1;
// Reserved record carrying (config hash, step counter) as raw u64 bits.
constexpr const char* kMetaName = "__meta";

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw ContractError("checkpoint: truncated file " + path);
    return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& path) {
    std::uint64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw ContractError("checkpoint: truncated file " + path);
    return v;
}

}  // namespace

void write_tensor_records(std::ostream& os, const std::map<std::string, Tensor>& tensors) {
    for (const auto& [name, t] : tensors) {
        put_u32(os, (std::uint32_t)name.size());
        os.write(name.data(), (std::streamsize)name.size());
        put_u32(os, (std::uint32_t)t.rank());
        for (std::size_t d : t.shape) put_u64(os, d);
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 (std::streamsize)(t.data.size() * sizeof(double)));
    }
}

std::map<std::string, Tensor> read_tensor_records(std::istream& is, const std::string& path) {
    std::map<std::string, Tensor> out;
    while (is.peek() != EOF) {
        std::uint32_t name_len = get_u32(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw ContractError("checkpoint: truncated name in " + path);
        std::uint32_t rank = get_u32(is, path);
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = (std::size_t)get_u64(is, path);
            n *= d;
        }
        std::vector<double> data(n);
        if (!is.read(reinterpret_cast<char*>(data.data()), (std::streamsize)(n * sizeof(double))))
            throw ContractError("checkpoint: truncated payload for '" + name + "' in " + path);
        out.emplace(std::move(name), Tensor{std::move(shape), std::move(data)});
    }
    return out;
}

void Checkpoint::save(const std::string& path) const {
    std::ostringstream os(std::ios::binary);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    std::map<std::string, Tensor> all = tensors;
    Tensor meta = Tensor::zeros({2});
    meta.data[0] = std::bit_cast<double>(config_hash);
    meta.data[1] = std::bit_cast<double>(step);
    all.emplace(kMetaName, std::move(meta));
    write_tensor_records(os, all);
    write_file_atomic(path, os.str());
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw ContractError("checkpoint: bad magic in " + path);
    std::uint32_t version = get_u32(is, path);
    if (version != kVersion)
        throw ContractError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.tensors = read_tensor_records(is, path);
    auto it = ck.tensors.find(kMetaName);
    if (it != ck.tensors.end()) {
        ck.config_hash = std::bit_cast<std::uint64_t>(it->second.data[0]);
        ck.step = std::bit_cast<std::uint64_t>(it->second.data[1]);
        ck.tensors.erase(it);
    }
    return ck;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw ContractError("io: cannot write " + tmp);
        os.write(contents.data(), (std::streamsize)contents.size());
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw ContractError("io: cannot rename " + tmp + " to " + path);
}

}  // namespace totem
