#include "neoward/token.hpp"

#include <sodium.h>

#include <cstring>

#include <json.hpp>

#include "neoward/common.hpp"

namespace neoward {

namespace {

using json = nlohmann::json;

constexpr std::string_view kHeader = R"({"alg":"HS256","typ":"JWT"})";

std::string b64url(std::string_view bytes) {
  std::string out(sodium_base64_encoded_len(bytes.size(), sodium_base64_VARIANT_URLSAFE_NO_PADDING), '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
                    sodium_base64_VARIANT_URLSAFE_NO_PADDING);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::string unb64url(std::string_view text) {
  std::string out(text.size(), '\0');
  std::size_t len = 0;
  if (sodium_base642bin(reinterpret_cast<unsigned char*>(out.data()), out.size(), text.data(), text.size(), nullptr,
                        &len, nullptr, sodium_base64_VARIANT_URLSAFE_NO_PADDING) != 0) {
    throw Error(ErrorCode::kMalformed, "token segment is not base64url");
  }
  out.resize(len);
  return out;
}

std::array<unsigned char, crypto_auth_hmacsha256_BYTES> mac(std::string_view signing_input, const SigningKey& key) {
  std::array<unsigned char, crypto_auth_hmacsha256_BYTES> out{};
  crypto_auth_hmacsha256_state st;
  crypto_auth_hmacsha256_init(&st, key.data(), key.size());
  crypto_auth_hmacsha256_update(&st, reinterpret_cast<const unsigned char*>(signing_input.data()), signing_input.size());
  crypto_auth_hmacsha256_final(&st, out.data());
  return out;
}

}  // namespace

std::string_view role_name(Role r) { return r == Role::kParent ? "parent" : "provider"; }

std::string sign_token(const AuthToken& token, const SigningKey& key) {
  if (sodium_init() < 0) throw Error(ErrorCode::kIo, "libsodium initialisation failed");
  json claims = {{"sub", token.subject}, {"role", role_name(token.role)}, {"exp", token.expiry_ms}};
  if (token.device) claims["dev"] = *token.device;
  std::string signing_input = b64url(kHeader) + "." + b64url(claims.dump());
  auto m = mac(signing_input, key);
  return signing_input + "." + b64url(std::string_view(reinterpret_cast<const char*>(m.data()), m.size()));
}

AuthToken verify_token(std::string_view token, const SigningKey& key, std::int64_t now_ms) {
  if (sodium_init() < 0) throw Error(ErrorCode::kIo, "libsodium initialisation failed");
  auto d1 = token.find('.');
  auto d2 = d1 == std::string_view::npos ? d1 : token.find('.', d1 + 1);
  if (d1 == std::string_view::npos || d2 == std::string_view::npos || token.find('.', d2 + 1) != std::string_view::npos)
    throw Error(ErrorCode::kMalformed, "token must have three segments");

  std::string header = unb64url(token.substr(0, d1));
  std::string claims_raw = unb64url(token.substr(d1 + 1, d2 - d1 - 1));
  std::string sig = unb64url(token.substr(d2 + 1));

  json hdr, claims;
  try {
    hdr = json::parse(header);
    claims = json::parse(claims_raw);
  } catch (const json::exception&) {
    throw Error(ErrorCode::kMalformed, "token segments are not JSON");
  }
  if (hdr.value("alg", "") != "HS256") throw Error(ErrorCode::kMalformed, "unsupported token algorithm");

  auto expected = mac(token.substr(0, d2), key);
  if (sig.size() != expected.size() || sodium_memcmp(sig.data(), expected.data(), expected.size()) != 0)
    throw Error(ErrorCode::kBadSignature, "token signature mismatch");

  AuthToken out;
  try {
    out.subject = claims.at("sub").get<std::string>();
    auto role = claims.at("role").get<std::string>();
    if (role == "parent") out.role = Role::kParent;
    else if (role == "provider") out.role = Role::kProvider;
    else throw Error(ErrorCode::kMalformed, "unknown role");
    out.expiry_ms = claims.at("exp").get<std::int64_t>();
    if (claims.contains("dev")) out.device = claims["dev"].get<DeviceId>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::kMalformed, "token claims incomplete");
  }
  if (out.expiry_ms <= now_ms) throw Error(ErrorCode::kExpired, "token expired");
  return out;
}

bool permits(const AuthToken& token, Permission p, std::optional<DeviceId> device) {
  if (token.role == Role::kProvider) return true;
  const bool own_device = token.device && device && *token.device == *device;
  return own_device && (p == Permission::kReadVitals || p == Permission::kReadSessions);
}

}  // namespace neoward
