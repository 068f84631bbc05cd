#include "reet/blackbox.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <istream>
#include <json.hpp>
#include <ostream>

namespace reet {

using nlohmann::json;

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

json tensor_shape_json(const Tensor& t) {
  json s = json::array();
  for (int d : t.shape()) s.push_back(d);
  return s;
}

template <class Error>
WireMessage decode_tensor_message(std::string_view line, bool request) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(std::string("unparseable message: ") + e.what());
  }
  try {
    WireMessage m;
    if (!j.is_object() || !j.contains("id") || !j["id"].is_number_integer()) throw Error("message lacks an integer id");
    m.id = j["id"].get<std::int64_t>();
    if (request) {
      Shape shape = j.at("shape").get<Shape>();
      if (shape.size() != 4) throw Error("request shape must have 4 dimensions");
      for (int d : shape)
        if (d <= 0) throw Error("request shape has a non-positive dimension");
      const auto bytes = base64_decode(j.at("data").get<std::string>());
      Tensor t(shape);
      if (bytes.size() != t.numel() * sizeof(float)) throw Error("request payload size does not match its shape");
      std::memcpy(t.ptr(), bytes.data(), bytes.size());
      m.tensor = std::move(t);
    } else {
      const json& rows = j.at("logits");
      if (!rows.is_array() || rows.empty()) throw Error("logits must be a non-empty array of rows");
      const std::size_t c = rows[0].size();
      std::vector<float> data;
      for (const json& row : rows) {
        if (!row.is_array() || row.size() != c || c == 0) throw Error("logit rows must be equally sized arrays");
        for (const json& v : row) {
          if (!v.is_number()) throw Error("logits must be numbers");
          data.push_back(static_cast<float>(v.get<double>()));
        }
      }
      m.tensor = Tensor(Shape{static_cast<int>(rows.size()), static_cast<int>(c)}, std::move(data));
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed message: ") + e.what());
  }
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw MalformedResponseError("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + static_cast<std::size_t>(k)];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        if (pad) throw MalformedResponseError("bad base64 padding");
        v[k] = decode_char(c);
        if (v[k] < 0) throw MalformedResponseError("invalid base64 character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

std::string encode_request(std::int64_t id, const Tensor& images) {
  json j;
  j["id"] = id;
  j["shape"] = tensor_shape_json(images);
  j["data"] = base64_encode({reinterpret_cast<const std::uint8_t*>(images.ptr()), images.numel() * sizeof(float)});
  return j.dump();
}

WireMessage decode_request(std::string_view line) { return decode_tensor_message<MalformedResponseError>(line, true); }

std::string encode_response(std::int64_t id, const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("logits must be [N,C]");
  json rows = json::array();
  for (int i = 0; i < logits.dim(0); ++i) {
    json row = json::array();
    for (int c = 0; c < logits.dim(1); ++c) row.push_back(static_cast<double>(logits[static_cast<std::size_t>(i) * logits.dim(1) + c]));
    rows.push_back(std::move(row));
  }
  json j;
  j["id"] = id;
  j["logits"] = std::move(rows);
  return j.dump();
}

WireMessage decode_response(std::string_view line) { return decode_tensor_message<MalformedResponseError>(line, false); }

void serve_classifier(const BlackBoxClassifier& model, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const WireMessage req = decode_request(line);
    out << encode_response(req.id, model.predict(req.tensor)) << '\n';
    out.flush();
  }
}

// ---------------------------------------------------------------------------

SubprocessClassifier::SubprocessClassifier(std::string command, std::chrono::milliseconds timeout)
    : command_(std::move(command)), timeout_(timeout) {
  // A dead child must surface as EPIPE, not kill the caller.
  ::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2], out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0 || ::pipe2(out_pipe, O_CLOEXEC) != 0)
    throw BlackBoxError(std::string("pipe: ") + std::strerror(errno));
  pid_ = ::fork();
  if (pid_ < 0) throw BlackBoxError(std::string("fork: ") + std::strerror(errno));
  if (pid_ == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
}

SubprocessClassifier::~SubprocessClassifier() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    // Give a well-behaved server a moment to exit on EOF, then insist.
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
      ::usleep(10000);
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
  }
}

std::uint64_t SubprocessClassifier::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

std::string SubprocessClassifier::describe_exit() const {
  int status = 0;
  const pid_t r = ::waitpid(pid_, &status, WNOHANG);
  if (r == pid_) {
    if (WIFEXITED(status)) return "exited with status " + std::to_string(WEXITSTATUS(status));
    if (WIFSIGNALED(status)) return "killed by signal " + std::to_string(WTERMSIG(status));
  }
  return "closed its output";
}

std::string SubprocessClassifier::read_line(std::chrono::steady_clock::time_point deadline) const {
  for (;;) {
    if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      broken_ = true;
      throw TimeoutError("black-box process '" + command_ + "' did not answer within " +
                         std::to_string(timeout_.count()) + " ms");
    }
    pollfd pfd{from_child_, POLLIN, 0};
    const int pr = ::poll(&pfd, 1, static_cast<int>(left.count()));
    if (pr < 0) {
      if (errno == EINTR) continue;
      throw BlackBoxError(std::string("poll: ") + std::strerror(errno));
    }
    if (pr == 0) continue;
    char chunk[65536];
    const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw BlackBoxError(std::string("read: ") + std::strerror(errno));
    }
    if (n == 0) {
      broken_ = true;
      ::usleep(1000);
      throw ProcessExitedError("black-box process '" + command_ + "' " + describe_exit());
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

Tensor SubprocessClassifier::predict(const Tensor& images) const {
  std::lock_guard lock(mu_);
  if (broken_) throw ProcessExitedError("black-box process '" + command_ + "' is no longer usable");
  const std::int64_t id = next_id_++;
  ++calls_;
  const std::string line = encode_request(id, images) + "\n";
  std::size_t off = 0;
  while (off < line.size()) {
    const ssize_t n = ::write(to_child_, line.data() + off, line.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      broken_ = true;
      throw ProcessExitedError("black-box process '" + command_ + "' stopped reading: " + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  const WireMessage resp = decode_response(read_line(deadline));
  if (resp.id != id) {
    broken_ = true;
    throw IdMismatchError("black-box response id " + std::to_string(resp.id) + " does not match request id " +
                          std::to_string(id));
  }
  if (resp.tensor.dim(0) != images.dim(0)) {
    throw MalformedResponseError("black-box returned " + std::to_string(resp.tensor.dim(0)) + " logit rows for " +
                                 std::to_string(images.dim(0)) + " images");
  }
  return resp.tensor;
}

}  // namespace reet
