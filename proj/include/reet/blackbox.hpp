#pragma once

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "reet/model.hpp"

namespace reet {

// Line-delimited JSON protocol spoken over a child's stdin/stdout:
//   request  {"id": int, "shape": [n,3,h,w], "data": base64(float32 LE, CHW)}
//   response {"id": int, "logits": [[float, ...], ...]}

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

class BlackBoxError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ProcessExitedError : public BlackBoxError {
  using BlackBoxError::BlackBoxError;
};
class MalformedResponseError : public BlackBoxError {
  using BlackBoxError::BlackBoxError;
};
class IdMismatchError : public BlackBoxError {
  using BlackBoxError::BlackBoxError;
};
class TimeoutError : public BlackBoxError {
  using BlackBoxError::BlackBoxError;
};

struct WireMessage {
  std::int64_t id = 0;
  Tensor tensor;
};

std::string encode_request(std::int64_t id, const Tensor& images);
/// Throws MalformedResponseError on anything that does not parse.
WireMessage decode_request(std::string_view line);
std::string encode_response(std::int64_t id, const Tensor& logits);
WireMessage decode_response(std::string_view line);

/// Answers requests from `in` until EOF. Malformed requests are fatal.
void serve_classifier(const BlackBoxClassifier& model, std::istream& in, std::ostream& out);

/// Black-box client for a classifier running in a child process. Requests
/// are serialized; spawn several clients for parallel throughput.
class SubprocessClassifier final : public BlackBoxClassifier {
public:
  explicit SubprocessClassifier(std::string command,
                                std::chrono::milliseconds timeout = std::chrono::seconds(30));
  ~SubprocessClassifier() override;
  SubprocessClassifier(const SubprocessClassifier&) = delete;
  SubprocessClassifier& operator=(const SubprocessClassifier&) = delete;

  Tensor predict(const Tensor& images) const override;
  std::uint64_t calls() const;
  const std::string& command() const { return command_; }

private:
  std::string read_line(std::chrono::steady_clock::time_point deadline) const;
  std::string describe_exit() const;

  std::string command_;
  std::chrono::milliseconds timeout_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  mutable std::mutex mu_;
  mutable std::int64_t next_id_ = 1;
  mutable std::uint64_t calls_ = 0;
  mutable std::string buffer_;
  mutable bool broken_ = false;
};

}  // namespace reet
