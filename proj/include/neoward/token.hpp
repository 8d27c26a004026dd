#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "neoward/vitalsim.hpp"

namespace neoward {

enum class Role { kParent, kProvider };
std::string_view role_name(Role r);

using SigningKey = std::array<std::uint8_t, 32>;

/// Compact token: base64url(header) "." base64url(claims) "." base64url(mac),
/// mac = HMAC-SHA256 over "header.claims". Claims JSON:
/// {"sub": str, "role": "parent"|"provider", "exp": epoch ms, "dev": id?}
struct AuthToken {
  std::string subject;
  Role role = Role::kProvider;
  std::int64_t expiry_ms = 0;
  std::optional<DeviceId> device;  // parents are bound to one device
};

std::string sign_token(const AuthToken& token, const SigningKey& key);
/// Throws kMalformed, kBadSignature or kExpired; needs no network access.
AuthToken verify_token(std::string_view token, const SigningKey& key, std::int64_t now_ms);

enum class Permission { kReadVitals, kReadSessions, kWriteAnnotations, kManageSessions, kReadAlerts, kAckAlerts, kSync, kListDevices };
/// Providers may do everything; parents read their own device's vitals and sessions.
bool permits(const AuthToken& token, Permission p, std::optional<DeviceId> device = std::nullopt);

}  // namespace neoward
