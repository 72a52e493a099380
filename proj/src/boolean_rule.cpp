#include "pfi/reaction_network.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace pfi {

namespace {

struct Token {
    enum class Kind { lparen, rparen, neg, conj, disj, ident, end } kind;
    std::string text;
};

std::vector<Token> tokenize(const std::string& s) {
    std::vector<Token> out;
    std::size_t i = 0;
    auto rest_is = [&](const char* lit) {
        return s.compare(i, std::char_traits<char>::length(lit), lit) == 0;
    };
    while (i < s.size()) {
        unsigned char c = s[i];
        if (std::isspace(c)) {
            ++i;
        } else if (c == '(') {
            out.push_back({Token::Kind::lparen, "("});
            ++i;
        } else if (c == ')') {
            out.push_back({Token::Kind::rparen, ")"});
            ++i;
        } else if (rest_is("∧")) {  // ∧
            out.push_back({Token::Kind::conj, "∧"});
            i += 3;
        } else if (rest_is("∨")) {  // ∨
            out.push_back({Token::Kind::disj, "∨"});
            i += 3;
        } else if (rest_is("¬")) {  // ¬
            out.push_back({Token::Kind::neg, "¬"});
            i += 2;
        } else if (c == '&') {
            out.push_back({Token::Kind::conj, "&"});
            i += rest_is("&&") ? 2 : 1;
        } else if (c == '|') {
            out.push_back({Token::Kind::disj, "|"});
            i += rest_is("||") ? 2 : 1;
        } else if (c == '!' || c == '~') {
            out.push_back({Token::Kind::neg, "!"});
            ++i;
        } else if (std::isalpha(c) || c == '_') {
            std::size_t j = i + 1;
            while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_'))
                ++j;
            std::string word = s.substr(i, j - i);
            std::string lower = word;
            std::transform(lower.begin(), lower.end(), lower.begin(),
                           [](unsigned char ch) { return char(std::tolower(ch)); });
            if (lower == "and")
                out.push_back({Token::Kind::conj, word});
            else if (lower == "or")
                out.push_back({Token::Kind::disj, word});
            else if (lower == "not")
                out.push_back({Token::Kind::neg, word});
            else
                out.push_back({Token::Kind::ident, word});
            i = j;
        } else {
            throw std::invalid_argument("boolean rule: unexpected character '" +
                                        std::string(1, s[i]) + "' in \"" + s + "\"");
        }
    }
    out.push_back({Token::Kind::end, ""});
    return out;
}

}  // namespace

/// Recursive descent over: disj := conj ('∨' conj)*, conj := unary ('∧'
/// unary)*, unary := '¬' unary | '(' disj ')' | ident.
class RuleParser {
public:
    RuleParser(BooleanRule& rule, std::vector<Token> tokens, const std::vector<std::string>& names)
        : rule_(rule), tokens_(std::move(tokens)), names_(names) {}

    void run() {
        rule_.root_ = parse_disj();
        expect(Token::Kind::end, "end of input");
        std::sort(rule_.inputs_.begin(), rule_.inputs_.end());
        rule_.inputs_.erase(std::unique(rule_.inputs_.begin(), rule_.inputs_.end()),
                            rule_.inputs_.end());
    }

private:
    using Node = BooleanRule::Node;

    int add(Node n) {
        rule_.nodes_.push_back(n);
        return int(rule_.nodes_.size()) - 1;
    }

    const Token& peek() const { return tokens_[pos_]; }
    Token take() { return tokens_[pos_++]; }

    void expect(Token::Kind kind, const std::string& what) {
        if (peek().kind != kind)
            throw std::invalid_argument("boolean rule: expected " + what + " near \"" +
                                        peek().text + "\" in \"" + rule_.text_ + "\"");
        ++pos_;
    }

    int parse_disj() {
        int lhs = parse_conj();
        while (peek().kind == Token::Kind::disj) {
            take();
            int rhs = parse_conj();
            lhs = add({Node::Kind::disj, lhs, rhs});
        }
        return lhs;
    }

    int parse_conj() {
        int lhs = parse_unary();
        while (peek().kind == Token::Kind::conj) {
            take();
            int rhs = parse_unary();
            lhs = add({Node::Kind::conj, lhs, rhs});
        }
        return lhs;
    }

    int parse_unary() {
        if (peek().kind == Token::Kind::neg) {
            take();
            int child = parse_unary();
            return add({Node::Kind::neg, child, -1});
        }
        if (peek().kind == Token::Kind::lparen) {
            take();
            int inner = parse_disj();
            expect(Token::Kind::rparen, "')'");
            return inner;
        }
        if (peek().kind == Token::Kind::ident) {
            Token tok = take();
            auto it = std::find(names_.begin(), names_.end(), tok.text);
            if (it == names_.end())
                throw std::invalid_argument("boolean rule: unknown name \"" + tok.text +
                                            "\" in \"" + rule_.text_ + "\"");
            int var = int(it - names_.begin());
            rule_.inputs_.push_back(var);
            return add({Node::Kind::var, var, -1});
        }
        throw std::invalid_argument("boolean rule: expected operand near \"" + peek().text +
                                    "\" in \"" + rule_.text_ + "\"");
    }

    BooleanRule& rule_;
    std::vector<Token> tokens_;
    const std::vector<std::string>& names_;
    std::size_t pos_ = 0;
};

BooleanRule BooleanRule::parse(const std::string& text, const std::vector<std::string>& names) {
    BooleanRule rule;
    rule.text_ = text;
    RuleParser(rule, tokenize(text), names).run();
    return rule;
}

bool BooleanRule::eval(const std::vector<bool>& values) const {
    // Nodes are created children-first, so a single forward pass suffices.
    std::vector<char> val(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        switch (n.kind) {
            case Node::Kind::var:
                if (n.a < 0 || n.a >= int(values.size()))
                    throw std::out_of_range("boolean rule: value vector too short");
                val[i] = values[n.a];
                break;
            case Node::Kind::neg:
                val[i] = !val[n.a];
                break;
            case Node::Kind::conj:
                val[i] = val[n.a] && val[n.b];
                break;
            case Node::Kind::disj:
                val[i] = val[n.a] || val[n.b];
                break;
        }
    }
    return val[root_];
}

}  // namespace pfi
