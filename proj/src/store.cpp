#include "neoward/store.hpp"

#include <openssl/evp.h>
#include <sodium.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>

namespace neoward {

namespace {

constexpr std::size_t kGcmNonce = 12;
constexpr std::size_t kGcmTag = 16;
constexpr std::size_t kMetaPrefix = 1 + 8 + 8 + 8 + 8 + 8 + 4;
constexpr std::uint32_t kMaxBody = 16u << 20;

struct CipherCtx {
  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  ~CipherCtx() { EVP_CIPHER_CTX_free(ctx); }
};

Bytes gcm_seal(const StoreKey& key, const std::array<std::uint8_t, kGcmNonce>& nonce, ByteView aad,
               ByteView plain) {
  CipherCtx c;
  int len = 0;
  Bytes out(plain.size() + kGcmTag);
  if (!c.ctx || EVP_EncryptInit_ex(c.ctx, EVP_aes_256_gcm(), nullptr, key.data(), nonce.data()) != 1 ||
      EVP_EncryptUpdate(c.ctx, nullptr, &len, aad.data(), static_cast<int>(aad.size())) != 1 ||
      EVP_EncryptUpdate(c.ctx, out.data(), &len, plain.data(), static_cast<int>(plain.size())) != 1 ||
      EVP_EncryptFinal_ex(c.ctx, out.data() + len, &len) != 1 ||
      EVP_CIPHER_CTX_ctrl(c.ctx, EVP_CTRL_GCM_GET_TAG, kGcmTag, out.data() + plain.size()) != 1) {
    throw Error(ErrorCode::kIo, "AES-256-GCM seal failed");
  }
  return out;
}

std::optional<Bytes> gcm_open(const StoreKey& key, ByteView nonce, ByteView aad, ByteView sealed) {
  if (sealed.size() < kGcmTag) return std::nullopt;
  const std::size_t n = sealed.size() - kGcmTag;
  CipherCtx c;
  int len = 0;
  Bytes out(n);
  Bytes tag(sealed.begin() + static_cast<std::ptrdiff_t>(n), sealed.end());
  if (!c.ctx || EVP_DecryptInit_ex(c.ctx, EVP_aes_256_gcm(), nullptr, key.data(), nonce.data()) != 1 ||
      EVP_DecryptUpdate(c.ctx, nullptr, &len, aad.data(), static_cast<int>(aad.size())) != 1 ||
      EVP_DecryptUpdate(c.ctx, out.data(), &len, sealed.data(), static_cast<int>(n)) != 1 ||
      EVP_CIPHER_CTX_ctrl(c.ctx, EVP_CTRL_GCM_SET_TAG, kGcmTag, tag.data()) != 1 ||
      EVP_DecryptFinal_ex(c.ctx, out.data() + len, &len) != 1) {
    return std::nullopt;
  }
  return out;
}

}  // namespace

std::string_view record_kind_name(RecordKind kind) {
  switch (kind) {
    case RecordKind::kVital: return "vital";
    case RecordKind::kAnnotation: return "annotation";
    case RecordKind::kSession: return "session";
    case RecordKind::kDeviceMeta: return "device-meta";
  }
  return "?";
}

std::optional<RecordKind> parse_record_kind(std::string_view name) {
  for (auto k : kAllRecordKinds) {
    if (record_kind_name(k) == name) return k;
  }
  return std::nullopt;
}

Bytes encode_vital_payload(const VitalSample& s) {
  Bytes out;
  out.reserve(26);
  ByteWriter w(out);
  w.i64(s.t_ms);
  w.u32(static_cast<std::uint32_t>(s.hr));
  w.u32(static_cast<std::uint32_t>(s.spo2));
  w.u32(static_cast<std::uint32_t>(s.rr));
  w.u32(static_cast<std::uint32_t>(s.temp));
  w.u8(s.motion);
  w.u8(s.flags);
  return out;
}

VitalSample decode_vital_payload(DeviceId device, ByteView payload) {
  ByteReader r(payload);
  VitalSample s;
  s.device_id = device;
  s.t_ms = r.i64();
  s.hr = static_cast<std::int32_t>(r.u32());
  s.spo2 = static_cast<std::int32_t>(r.u32());
  s.rr = static_cast<std::int32_t>(r.u32());
  s.temp = static_cast<std::int32_t>(r.u32());
  s.motion = r.u8();
  s.flags = r.u8();
  if (!r.done()) throw Error(ErrorCode::kDecode, "vital payload has trailing bytes");
  return s;
}

Store::Store(std::filesystem::path dir, const StoreKey& key, StoreOptions options)
    : dir_(std::move(dir)), key_(key), options_(options) {
  if (sodium_init() < 0) throw Error(ErrorCode::kIo, "libsodium initialisation failed");
  std::filesystem::create_directories(dir_);
  load();
  for (auto kind : kAllRecordKinds) {
    auto path = log_path(kind);
    std::FILE* f = std::fopen(path.c_str(), "ab");
    if (!f) throw Error(ErrorCode::kIo, "cannot open " + path.string());
    files_[static_cast<std::size_t>(kind)] = f;
  }
}

Store::~Store() {
  try {
    flush();
  } catch (...) {
  }
  for (auto* f : files_) {
    if (f) std::fclose(f);
  }
}

std::filesystem::path Store::log_path(RecordKind kind) const {
  return dir_ / (std::string(record_kind_name(kind)) + ".log");
}

void Store::load() {
  std::vector<StoredRecord> all;
  for (auto kind : kAllRecordKinds) {
    auto path = log_path(kind);
    if (!std::filesystem::exists(path)) continue;
    Bytes data = read_file(path.string());
    std::size_t pos = 0;
    std::size_t good_end = 0;
    while (data.size() - pos >= 8) {
      ByteReader hdr(ByteView(data).subspan(pos, 8));
      const std::uint32_t body_len = hdr.u32();
      const std::uint32_t body_crc = hdr.u32();
      if (body_len > kMaxBody || data.size() - pos - 8 < body_len) break;
      ByteView body = ByteView(data).subspan(pos + 8, body_len);
      if (crc32(body) != body_crc) break;

      ByteReader r(body);
      StoredRecord rec;
      rec.key.kind = static_cast<RecordKind>(r.u8());
      rec.key.device_id = r.u64();
      rec.key.record_id = r.u64();
      rec.t_ms = r.i64();
      rec.version = r.u64();
      rec.cursor = r.u64();
      rec.checksum = r.u32();
      auto nonce = r.raw(kGcmNonce);
      auto sealed_len = r.u32();
      auto sealed = r.raw(sealed_len);
      auto plain = gcm_open(key_, nonce, body.first(kMetaPrefix), sealed);
      if (!plain) throw Error(ErrorCode::kAuthFailed, "store record fails authentication (wrong key?) in " + path.string());
      rec.payload = std::move(*plain);
      if (crc32(rec.payload) != rec.checksum) throw Error(ErrorCode::kChecksumMismatch, "payload checksum mismatch in " + path.string());
      all.push_back(std::move(rec));
      pos += 8 + body_len;
      good_end = pos;
    }
    if (good_end != data.size()) std::filesystem::resize_file(path, good_end);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.cursor < b.cursor; });
  for (auto& rec : all) index(std::move(rec));
  if (options_.retain_days > 0 && !vitals_.empty()) {
    std::int64_t newest = 0;
    for (const auto& [dev, series] : vitals_) {
      if (!series.empty()) newest = std::max(newest, series.rbegin()->first);
    }
    prune(newest);
  }
}

void Store::index(StoredRecord rec) {
  max_cursor_ = std::max(max_cursor_, rec.cursor);
  auto it = latest_.find(rec.key);
  if (it != latest_.end()) {
    if (it->second.version >= rec.version) return;
    by_cursor_.erase(it->second.cursor);
  }
  by_cursor_[rec.cursor] = rec.key;
  if (rec.key.kind == RecordKind::kVital) {
    auto s = decode_vital_payload(rec.key.device_id, rec.payload);
    vitals_[rec.key.device_id][s.t_ms] = s;
  }
  latest_[rec.key] = std::move(rec);
}

void Store::write_record(const StoredRecord& rec) {
  Bytes body;
  body.reserve(kMetaPrefix + kGcmNonce + 4 + rec.payload.size() + kGcmTag);
  ByteWriter w(body);
  w.u8(static_cast<std::uint8_t>(rec.key.kind));
  w.u64(rec.key.device_id);
  w.u64(rec.key.record_id);
  w.i64(rec.t_ms);
  w.u64(rec.version);
  w.u64(rec.cursor);
  w.u32(rec.checksum);
  std::array<std::uint8_t, kGcmNonce> nonce{};
  randombytes_buf(nonce.data(), nonce.size());
  Bytes sealed = gcm_seal(key_, nonce, ByteView(body).first(kMetaPrefix), rec.payload);
  w.raw(nonce);
  w.u32(static_cast<std::uint32_t>(sealed.size()));
  w.raw(sealed);

  Bytes framed;
  framed.reserve(body.size() + 8);
  ByteWriter fw(framed);
  fw.u32(static_cast<std::uint32_t>(body.size()));
  fw.u32(crc32(body));
  fw.raw(body);
  std::FILE* f = files_[static_cast<std::size_t>(rec.key.kind)];
  if (std::fwrite(framed.data(), 1, framed.size(), f) != framed.size())
    throw Error(ErrorCode::kIo, "store append failed");
  if (options_.flush_every > 0 && ++unflushed_ >= options_.flush_every) {
    for (auto* file : files_) {
      std::fflush(file);
      ::fsync(::fileno(file));
    }
    unflushed_ = 0;
  }
}

StoredRecord Store::put(RecordKind kind, DeviceId device, std::uint64_t record_id, std::int64_t t_ms,
                        ByteView payload) {
  std::unique_lock lock(mu_);
  RecordKey key{kind, device, record_id};
  StoredRecord rec;
  rec.key = key;
  rec.version = 1;
  rec.t_ms = t_ms;
  if (auto it = latest_.find(key); it != latest_.end()) {
    if (std::equal(payload.begin(), payload.end(), it->second.payload.begin(), it->second.payload.end()))
      return it->second;
    rec.version = it->second.version + 1;
    // mutation times stay strictly increasing per entity
    rec.t_ms = std::max(t_ms, it->second.t_ms + 1);
  }
  rec.cursor = max_cursor_ + 1;
  rec.payload.assign(payload.begin(), payload.end());
  rec.checksum = crc32(rec.payload);
  write_record(rec);
  index(rec);
  return rec;
}

std::size_t Store::append_vitals(std::span<const VitalSample> samples) {
  std::size_t added = 0;
  for (const auto& s : samples) {
    auto before = max_cursor();
    put(RecordKind::kVital, s.device_id, static_cast<std::uint64_t>(s.t_ms), s.t_ms, encode_vital_payload(s));
    if (max_cursor() != before) ++added;
  }
  return added;
}

std::optional<StoredRecord> Store::get(const RecordKey& key) const {
  std::shared_lock lock(mu_);
  auto it = latest_.find(key);
  if (it == latest_.end()) return std::nullopt;
  return it->second;
}

std::vector<VitalSample> Store::query_vitals(DeviceId device, std::int64_t from_ms, std::int64_t to_ms) const {
  if (from_ms > to_ms) throw Error(ErrorCode::kInvalidArgument, "from must be <= to");
  std::shared_lock lock(mu_);
  std::vector<VitalSample> out;
  auto it = vitals_.find(device);
  if (it == vitals_.end()) return out;
  for (auto v = it->second.lower_bound(from_ms); v != it->second.end() && v->first <= to_ms; ++v)
    out.push_back(v->second);
  return out;
}

std::vector<DeviceId> Store::devices() const {
  std::shared_lock lock(mu_);
  std::vector<DeviceId> out;
  for (const auto& [key, rec] : latest_) out.push_back(key.device_id);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<StoredRecord> Store::records(RecordKind kind, std::optional<DeviceId> device) const {
  std::shared_lock lock(mu_);
  std::vector<StoredRecord> out;
  for (const auto& [key, rec] : latest_) {
    if (key.kind == kind && (!device || key.device_id == *device)) out.push_back(rec);
  }
  return out;
}

std::vector<StoredRecord> Store::changed_since(std::uint64_t cursor) const {
  std::shared_lock lock(mu_);
  std::vector<StoredRecord> out;
  for (auto it = by_cursor_.upper_bound(cursor); it != by_cursor_.end(); ++it) out.push_back(latest_.at(it->second));
  return out;
}

std::map<RecordKey, StoredRecord> Store::snapshot() const {
  std::shared_lock lock(mu_);
  return latest_;
}

std::uint64_t Store::max_cursor() const {
  std::shared_lock lock(mu_);
  return max_cursor_;
}

std::size_t Store::vital_count() const {
  std::shared_lock lock(mu_);
  std::size_t n = 0;
  for (const auto& [dev, series] : vitals_) n += series.size();
  return n;
}

void Store::flush() {
  std::unique_lock lock(mu_);
  for (auto* f : files_) {
    if (!f) continue;
    std::fflush(f);
    ::fsync(::fileno(f));
  }
  unflushed_ = 0;
}

void Store::prune(std::int64_t now_ms) {
  if (options_.retain_days <= 0) return;
  std::unique_lock lock(mu_);
  const std::int64_t cutoff = now_ms - static_cast<std::int64_t>(options_.retain_days) * 86'400'000LL;
  for (auto& [dev, series] : vitals_) series.erase(series.begin(), series.lower_bound(cutoff));
}

std::optional<std::string> Store::read_meta(const std::string& name) const {
  auto path = dir_ / (name + ".meta");
  std::ifstream in(path);
  if (!in) return std::nullopt;
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void Store::write_meta(const std::string& name, const std::string& value) {
  auto path = dir_ / (name + ".meta");
  auto tmp = dir_ / (name + ".meta.tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << value;
    out.flush();
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace neoward
